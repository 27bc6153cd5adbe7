"""Model stealing by regressing a fresh copy onto the target's posteriors."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from riskprobe import metrics
from riskprobe.access import TargetModelHandle
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import EmptyDataset, ShapeMismatch
from riskprobe.models import Loss, ModelSpec, Optimizer, TrainConfig, fit, predict


def steal_config(seed: int = 0, epochs: int = 50) -> TrainConfig:
    """MSE on posteriors, SGD (momentum 0.9, lr 1e-2), 50 epochs."""
    return TrainConfig(
        epochs=epochs,
        batch_size=64,
        optimizer=Optimizer.SGD_MOMENTUM,
        lr_schedule=[(0, 1e-2)],
        weight_decay=0.0,
        momentum=0.9,
        loss=Loss.MSE_ON_POSTERIORS,
        seed=seed,
    )


@dataclass
class StolenModel:
    model: nn.Module
    architecture_id: str
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes


def _hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def steal_model(
    handle: TargetModelHandle,
    aux_ds: LabeledImageDataset,
    cfg: TrainConfig | None = None,
    spec: ModelSpec | None = None,
    target_hash: str | None = None,
) -> StolenModel:
    """Query the target on every auxiliary sample and fit a same-architecture copy.

    Only ``handle.query`` is used.  The soft posteriors are the regression
    targets; labels in ``aux_ds`` are ignored.
    """
    cfg = cfg or steal_config()
    if len(aux_ds) == 0:
        raise EmptyDataset("auxiliary dataset is empty")
    spec = spec or ModelSpec(handle.architecture_id, handle.num_classes, tuple(aux_ds.images.shape[1:]))
    x = torch.from_numpy(aux_ds.images)
    soft = handle.query(x)
    model = spec.build(seed=cfg.seed)
    fit(model, x, soft, cfg, lambda out, t, _: F.mse_loss(F.softmax(out, dim=1), t))
    return StolenModel(
        model,
        spec.architecture_id,
        {"query_set_hash": _hash(aux_ds.images), "target_hash": target_hash, "queries": len(aux_ds)},
    )


def agreement(stolen, handle: TargetModelHandle, eval_ds: LabeledImageDataset) -> float:
    """Fraction of ``eval_ds`` on which stolen and target predict the same class.

    Argmax ties resolve to the lowest class index on both sides.
    """
    model = stolen.model if isinstance(stolen, StolenModel) else stolen
    if getattr(model, "num_classes", handle.num_classes) != handle.num_classes:
        raise ShapeMismatch("stolen and target models disagree on the number of classes")
    return metrics.agreement(predict(model, eval_ds.images), handle.predict(eval_ds.images))


def run_attack(handle: TargetModelHandle, aux_ds: LabeledImageDataset, eval_ds: LabeledImageDataset, cfg=None, target_hash=None) -> tuple[dict, StolenModel]:
    stolen = steal_model(handle, aux_ds, cfg, target_hash=target_hash)
    result = {
        "agreement": agreement(stolen, handle, eval_ds),
        "acc": metrics.accuracy(predict(stolen.model, eval_ds.images), eval_ds.labels),
    }
    return result, stolen
