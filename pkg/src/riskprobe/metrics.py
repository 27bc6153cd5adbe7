"""Attack metrics: accuracy, F1, AUC/ROC, agreement, MSE, correlation."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from riskprobe.errors import DegenerateLabels, ZeroVariance


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean()) if len(labels) else float("nan")


def f1_score(pred, labels, positive: int = 1) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    tp = np.sum((pred == positive) & (labels == positive))
    fp = np.sum((pred == positive) & (labels != positive))
    fn = np.sum((pred != positive) & (labels == positive))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def macro_f1(pred, labels, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over the classes present in either array."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    classes = range(num_classes) if num_classes else np.union1d(pred, labels)
    return float(np.mean([f1_score(pred, labels, positive=c) for c in classes]))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties between a positive and a negative count as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), starting at (0, 0) and ending at (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(l)[cut]
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[cut]]
    return fpr, tpr, thresholds


def agreement(pred_a, pred_b) -> float:
    """Fraction of samples on which two models predict the same class."""
    pred_a, pred_b = np.asarray(pred_a), np.asarray(pred_b)
    if pred_a.shape != pred_b.shape:
        raise ValueError("prediction arrays differ in shape")
    return float((pred_a == pred_b).mean())


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def overfitting_level(train_acc: float, test_acc: float) -> float:
    return train_acc - test_acc


def pearson_correlation(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or len(xs) < 2:
        raise ValueError("need two equal-length sequences with at least 2 entries")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    sx, sy = np.sqrt((dx**2).sum()), np.sqrt((dy**2).sum())
    if sx == 0 or sy == 0:
        raise ZeroVariance("correlation undefined for a constant sequence")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def compute_metrics(scores, labels, kinds=("acc", "f1", "auc"), num_classes: int | None = None) -> dict:
    """Evaluate the requested metrics.

    ``scores`` is either a 1-D positive-class score (binary tasks, thresholded
    at 0.5) or an N x K posterior matrix (argmax prediction).  ``roc`` yields
    the point list as ``{"fpr": [...], "tpr": [...]}``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2:
        pred = scores.argmax(axis=1)
        pos_score = scores[:, 1] if scores.shape[1] == 2 else None
    else:
        pred = (scores >= 0.5).astype(np.int64)
        pos_score = scores
    out: dict = {}
    for kind in kinds:
        if kind == "acc":
            out["acc"] = accuracy(pred, labels)
        elif kind == "f1":
            out["f1"] = f1_score(pred, labels)
        elif kind == "macro_f1":
            out["macro_f1"] = macro_f1(pred, labels, num_classes)
        elif kind == "auc":
            if pos_score is None:
                raise ValueError("AUC is defined for binary scores only")
            out["auc"] = auc(pos_score, labels)
        elif kind == "roc":
            fpr, tpr, _ = roc_curve(pos_score, labels)
            out["roc"] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}
        elif kind == "mse":
            out["mse"] = mse(scores, labels)
        elif kind == "agreement":
            out["agreement"] = agreement(pred, labels)
        else:
            raise ValueError(f"unknown metric kind {kind!r}")
    return out
