"""Attribute inference from the target model's penultimate-layer embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from riskprobe import metrics
from riskprobe.access import TargetModelHandle
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import DegenerateLabels

HIDDEN = 64


def compose_attributes(ds: LabeledImageDataset, names: list[str]) -> np.ndarray:
    """Combine binary attributes into one integer label (bit i = names[i])."""
    out = np.zeros(len(ds), dtype=np.int64)
    for i, name in enumerate(names):
        out |= ds.attributes[name].astype(np.int64) << i
    return out


def extract_embeddings(handle: TargetModelHandle, samples: LabeledImageDataset | np.ndarray, layer: str | None = None) -> np.ndarray:
    images = samples.images if isinstance(samples, LabeledImageDataset) else samples
    return handle.embedding(images, layer).numpy()


class AttrInfAttackModel(nn.Module):
    def __init__(self, in_dim: int, num_values: int, hidden: int = HIDDEN):
        super().__init__()
        self.num_values = num_values
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, num_values))

    def forward(self, x):
        return self.net(x)

    @torch.no_grad()
    def posteriors(self, embeddings) -> np.ndarray:
        self.eval()
        return F.softmax(self(torch.as_tensor(embeddings, dtype=torch.float32)), dim=1).numpy()


@dataclass
class AttrTrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0


def train_attrinf(embeddings, attr_labels, cfg: AttrTrainConfig | None = None, num_values: int | None = None) -> AttrInfAttackModel:
    cfg = cfg or AttrTrainConfig()
    x = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(attr_labels), dtype=torch.long)
    if len(torch.unique(y)) < 2:
        raise DegenerateLabels("attribute labels take a single value")
    num_values = num_values or int(y.max()) + 1
    torch.manual_seed(cfg.seed)
    model = AttrInfAttackModel(x.shape[1], num_values)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            F.cross_entropy(model(x[idx]), y[idx]).backward()
            opt.step()
    model.eval()
    return model


def infer_attributes(attack_model: AttrInfAttackModel, handle: TargetModelHandle, samples, layer: str | None = None) -> np.ndarray:
    """Attribute posteriors (N x values) for each sample."""
    return attack_model.posteriors(extract_embeddings(handle, samples, layer))


def attribute_metrics(posteriors: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy plus F1 for binary attributes, macro-F1 otherwise."""
    kind = "f1" if posteriors.shape[1] == 2 else "macro_f1"
    return metrics.compute_metrics(posteriors, labels, ("acc", kind), num_classes=posteriors.shape[1])


def run_attack(
    handle: TargetModelHandle,
    aux: LabeledImageDataset,
    evaluation: LabeledImageDataset,
    attribute_names: list[str],
    cfg: AttrTrainConfig | None = None,
    layer: str | None = None,
) -> dict:
    """Train on the auxiliary set's embeddings and attributes, score on ``evaluation``.

    Evaluation attributes are only read to compute the metrics.
    """
    y_aux = compose_attributes(aux, attribute_names)
    num_values = 2 ** len(attribute_names)
    model = train_attrinf(extract_embeddings(handle, aux, layer), y_aux, cfg, num_values)
    post = infer_attributes(model, handle, evaluation, layer)
    return attribute_metrics(post, compose_attributes(evaluation, attribute_names))
