"""Architectures and the shared training loop with its configuration."""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from riskprobe.data import LabeledImageDataset
from riskprobe.errors import ConfigError, EmptyDataset, ShapeMismatch


class Optimizer(str, Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class Loss(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE_ON_POSTERIORS = "mse_on_posteriors"
    DISTILL = "distill"


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    optimizer: Optimizer = Optimizer.SGD_MOMENTUM
    lr_schedule: list[tuple[int, float]] = field(default_factory=lambda: [(0, 1e-2), (50, 1e-3), (100, 1e-4)])
    weight_decay: float = 5e-4
    momentum: float = 0.9
    loss: Loss = Loss.CROSS_ENTROPY
    seed: int = 0

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        self.loss = Loss(self.loss)
        self.lr_schedule = [(int(t), float(lr)) for t, lr in self.lr_schedule]
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ConfigError("lr_schedule must start at epoch 0")
        thresholds = [t for t, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ConfigError("lr_schedule thresholds must be strictly increasing")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch; intervals are [threshold, next)."""
        thresholds = [t for t, _ in self.lr_schedule]
        return self.lr_schedule[bisect.bisect_right(thresholds, epoch) - 1][1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        d["loss"] = self.loss.value
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d


def default_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        epochs=300,
        batch_size=64,
        optimizer=Optimizer.SGD_MOMENTUM,
        lr_schedule=[(0, 1e-2), (50, 1e-3), (100, 1e-4)],
        weight_decay=5e-4,
        momentum=0.9,
        loss=Loss.CROSS_ENTROPY,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# architectures


class SimpleCNN(nn.Module):
    """Two conv blocks and two fully connected layers."""

    penultimate_layer = "fc1_act"
    last_layer = "fc2"

    def __init__(self, in_channels: int = 3, num_classes: int = 10, widths=(32, 64, 128)):
        super().__init__()
        c1, c2, hidden = widths
        self.num_classes = num_classes
        self.conv1 = nn.Conv2d(in_channels, c1, kernel_size=3)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3)
        self.pool = nn.MaxPool2d(2)
        # 32 -> 30 -> 15 -> 13 -> 6
        self.fc1 = nn.Linear(c2 * 6 * 6, hidden)
        self.fc1_act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = self.fc1_act(self.fc1(x.flatten(1)))
        return self.fc2(x)


class _TorchvisionAdapter(nn.Module):
    """Wrap a torchvision classifier; grey inputs are repeated to 3 channels."""

    def __init__(self, net: nn.Module, in_channels: int, num_classes: int, penultimate: str, last: str):
        super().__init__()
        self.net = net
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.penultimate_layer = f"net.{penultimate}"
        self.last_layer = f"net.{last}"

    def forward(self, x):
        if self.in_channels == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.net(x)


def _torchvision(name: str, penultimate: str, last: str):
    def build(in_channels: int, num_classes: int) -> nn.Module:
        import torchvision

        net = getattr(torchvision.models, name)(weights=None, num_classes=num_classes)
        return _TorchvisionAdapter(net, in_channels, num_classes, penultimate, last)

    return build


ARCHITECTURES: dict[str, Callable[[int, int], nn.Module]] = {
    "simple_cnn": lambda c, k: SimpleCNN(c, k),
    "simple_cnn_small": lambda c, k: SimpleCNN(c, k, widths=(16, 32, 64)),
    "alexnet": _torchvision("alexnet", "classifier.5", "classifier.6"),
    "resnet18": _torchvision("resnet18", "avgpool", "fc"),
    "vgg11": _torchvision("vgg11", "classifier.4", "classifier.6"),
    "vgg19": _torchvision("vgg19", "classifier.4", "classifier.6"),
}


def register_architecture(name: str, factory: Callable[[int, int], nn.Module]) -> None:
    """Plug in an architecture; ``factory(in_channels, num_classes)`` builds it."""
    ARCHITECTURES[name] = factory


@dataclass(frozen=True)
class ModelSpec:
    architecture_id: str = "simple_cnn"
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def build(self, seed: int | None = None) -> nn.Module:
        if self.architecture_id not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture_id!r}")
        if seed is not None:
            torch.manual_seed(seed)
        model = ARCHITECTURES[self.architecture_id](self.input_shape[0], self.num_classes)
        model.architecture_id = self.architecture_id
        model.num_classes = self.num_classes
        return model


def spec_for(ds: LabeledImageDataset, architecture_id: str = "simple_cnn") -> ModelSpec:
    return ModelSpec(architecture_id, ds.num_classes, tuple(ds.images.shape[1:]))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: nn.Module
    train_acc: float
    test_acc: float
    history: list[float] = field(default_factory=list)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    lr = cfg.lr_at(0)
    if cfg.optimizer is Optimizer.ADAM:
        return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def fit(
    model: nn.Module,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    cfg: TrainConfig,
    loss_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
) -> list[float]:
    """Mini-batch training loop shared by every trainer.

    ``loss_fn(output, batch_targets, batch_index)`` gets the model output,
    the matching rows of ``targets`` and the sample indices.  Returns the
    mean loss of each epoch.
    """
    if len(inputs) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        perm = torch.randperm(len(inputs), generator=gen)
        total = 0.0
        for start in range(0, len(inputs), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(inputs[idx]), targets[idx], idx)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(inputs))
    model.eval()
    return history


@torch.no_grad()
def predict(model: nn.Module, images, batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = torch.as_tensor(images, dtype=torch.float32)
    out = [model(x[i : i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.empty(0, dtype=np.int64)


def accuracy(model: nn.Module, ds: LabeledImageDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float((predict(model, ds.images) == ds.labels).mean())


def _check_compatible(spec: ModelSpec, ds: LabeledImageDataset) -> None:
    if len(ds) == 0:
        raise EmptyDataset("training dataset is empty")
    if ds.num_classes != spec.num_classes:
        raise ShapeMismatch(f"dataset has {ds.num_classes} classes, model expects {spec.num_classes}")
    if tuple(ds.images.shape[1:]) != tuple(spec.input_shape):
        raise ShapeMismatch(f"dataset images {ds.images.shape[1:]} do not match input {spec.input_shape}")


def train_classifier(
    spec: ModelSpec,
    train_ds: LabeledImageDataset,
    test_ds: LabeledImageDataset,
    cfg: TrainConfig,
) -> TrainResult:
    _check_compatible(spec, train_ds)
    model = spec.build(seed=cfg.seed)
    x, y = train_ds.tensors()
    if cfg.loss is not Loss.CROSS_ENTROPY:
        raise ConfigError(f"train_classifier uses cross-entropy, got {cfg.loss.value}")
    history = fit(model, x, y, cfg, lambda out, t, _: F.cross_entropy(out, t))
    return TrainResult(model, accuracy(model, train_ds), accuracy(model, test_ds), history)


def train_shadow(
    spec: ModelSpec,
    shadow_train: LabeledImageDataset,
    shadow_test: LabeledImageDataset,
    cfg: TrainConfig,
) -> nn.Module:
    """Train a shadow model with the target's architecture and recipe."""
    return train_classifier(spec, shadow_train, shadow_test, cfg).model


# ---------------------------------------------------------------------------
# checkpoints


def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: nn.Module, spec: ModelSpec, cfg: TrainConfig | None = None, **meta) -> Path:
    """Persist weights plus the provenance needed by downstream attacks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "architecture_id": spec.architecture_id,
        "num_classes": spec.num_classes,
        "input_shape": list(spec.input_shape),
        "state_dict": model.state_dict(),
        "train_config": cfg.to_dict() if cfg else None,
        "weights_hash": state_hash(model),
        **meta,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[nn.Module, ModelSpec, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    spec = ModelSpec(payload["architecture_id"], payload["num_classes"], tuple(payload["input_shape"]))
    model = spec.build()
    model.load_state_dict(payload.pop("state_dict"))
    model.eval()
    return model, spec, payload
