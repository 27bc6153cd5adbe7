"""Threat-model taxonomy and the capability-gated target model handle."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad, vmap

from riskprobe.errors import CapabilityError, IllegalThreatModel


class Access(str, Enum):
    BLACK_BOX = "black_box"
    WHITE_BOX = "white_box"


class Auxiliary(str, Enum):
    PARTIAL = "partial"
    SHADOW = "shadow"
    NONE = "none"


class Attack(str, Enum):
    MEMINF = "meminf"
    MODINV = "modinv"
    ATTRINF = "attrinf"
    MODSTEAL = "modsteal"


_SHORT_ACCESS = {Access.BLACK_BOX: "bb", Access.WHITE_BOX: "wb"}


@dataclass(frozen=True)
class ThreatModel:
    access: Access
    auxiliary: Auxiliary

    def __post_init__(self):
        try:
            object.__setattr__(self, "access", Access(self.access))
            object.__setattr__(self, "auxiliary", Auxiliary(self.auxiliary))
        except ValueError as exc:
            raise IllegalThreatModel(str(exc)) from None
        if self.access is Access.BLACK_BOX and self.auxiliary is Auxiliary.NONE:
            raise IllegalThreatModel(
                "black-box access without an auxiliary dataset is not a supported threat model"
            )

    @property
    def name(self) -> str:
        """Short identifier such as ``bb_shadow`` or ``wb_none``."""
        return f"{_SHORT_ACCESS[self.access]}_{self.auxiliary.value}"

    @classmethod
    def parse(cls, name: str) -> "ThreatModel":
        try:
            acc, aux = name.strip().lower().split("_", 1)
            access = {"bb": Access.BLACK_BOX, "wb": Access.WHITE_BOX}[acc]
        except (ValueError, KeyError):
            raise IllegalThreatModel(f"unknown threat model {name!r}") from None
        return cls(access, aux)

    def __str__(self) -> str:
        a = "M^B" if self.access is Access.BLACK_BOX else "M^W"
        d = {"partial": "D^P", "shadow": "D^S", "none": "D^N"}[self.auxiliary.value]
        return f"<{a}, {d}>"


def make_threat_model(access, auxiliary) -> ThreatModel:
    return ThreatModel(Access(access), Auxiliary(auxiliary))


ALL_THREAT_MODELS: tuple[ThreatModel, ...] = (
    ThreatModel(Access.BLACK_BOX, Auxiliary.PARTIAL),
    ThreatModel(Access.BLACK_BOX, Auxiliary.SHADOW),
    ThreatModel(Access.WHITE_BOX, Auxiliary.PARTIAL),
    ThreatModel(Access.WHITE_BOX, Auxiliary.SHADOW),
    ThreatModel(Access.WHITE_BOX, Auxiliary.NONE),
)

_APPLICABLE = {
    ("black_box", "partial"): frozenset({Attack.MEMINF, Attack.MODSTEAL}),
    ("black_box", "shadow"): frozenset({Attack.MEMINF, Attack.MODSTEAL}),
    ("white_box", "partial"): frozenset({Attack.MEMINF, Attack.ATTRINF}),
    ("white_box", "shadow"): frozenset({Attack.MEMINF, Attack.ATTRINF, Attack.MODINV}),
    ("white_box", "none"): frozenset({Attack.MODINV}),
}


def attacks_applicable(tm: ThreatModel) -> frozenset[Attack]:
    return _APPLICABLE[(tm.access.value, tm.auxiliary.value)]


def check_pair(attack, tm: ThreatModel) -> None:
    """Raise :class:`IllegalThreatModel` unless ``attack`` can run under ``tm``."""
    attack = Attack(attack)
    if attack not in attacks_applicable(tm):
        raise IllegalThreatModel(f"{attack.value} is not applicable under {tm.name} {tm}")


# ---------------------------------------------------------------------------
# model handle


def _resolve_module(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise KeyError(f"model has no layer named {name!r}")
    return modules[name]


def _last_linear_name(model: nn.Module) -> str:
    name = getattr(model, "last_layer", None)
    if name:
        return name
    linears = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise CapabilityError("model has no linear output layer")
    return linears[-1]


class TargetModelHandle:
    """Uniform access to a classifier.

    ``query`` is always available and returns softmax posteriors.  The
    remaining accessors need white-box access and raise
    :class:`CapabilityError` on a black-box handle.  Logits are never exposed.
    """

    def __init__(
        self,
        model: nn.Module,
        access: Access,
        num_classes: int,
        architecture_id: str = "custom",
        batch_size: int = 512,
    ):
        self._model = model.eval()
        self.access = Access(access)
        self.num_classes = int(num_classes)
        self.architecture_id = architecture_id
        self.batch_size = batch_size
        # autodiff accessors mutate requires_grad / hooks on the shared module
        self._lock = threading.RLock()

    @property
    def white_box(self) -> bool:
        return self.access is Access.WHITE_BOX

    def _require_white_box(self, what: str) -> None:
        if not self.white_box:
            raise CapabilityError(f"{what} requires white-box access to the target model")

    # -- black-box surface -------------------------------------------------

    @torch.no_grad()
    def query(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float32)
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        with self._lock:
            out = [
                F.softmax(self._model(x[i : i + self.batch_size]), dim=1)
                for i in range(0, len(x), self.batch_size)
            ]
        probs = torch.cat(out) if out else torch.empty(0, self.num_classes)
        return probs[0] if single else probs

    def predict(self, x) -> np.ndarray:
        return self.query(x).argmax(dim=1).numpy()

    # -- white-box surface -------------------------------------------------

    def module(self) -> nn.Module:
        """The wrapped module itself (white-box only)."""
        self._require_white_box("module access")
        return self._model

    def parameters(self) -> list[torch.Tensor]:
        self._require_white_box("parameter access")
        return [p.detach().clone() for p in self._model.parameters()]

    def posteriors(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable posteriors, for optimization through the model."""
        self._require_white_box("differentiable queries")
        with self._lock:
            return F.softmax(self._model(x), dim=1)

    def loss(self, x, y) -> torch.Tensor:
        """Per-sample cross-entropy at the given labels."""
        self._require_white_box("loss access")
        x = torch.as_tensor(x, dtype=torch.float32)
        y = torch.as_tensor(y, dtype=torch.long)
        with self._lock, torch.no_grad():
            return torch.cat(
                [
                    F.cross_entropy(self._model(x[i : i + self.batch_size]), y[i : i + self.batch_size], reduction="none")
                    for i in range(0, len(x), self.batch_size)
                ]
            )

    def last_layer_gradient(self, x, y) -> torch.Tensor:
        """Flattened per-sample gradient of the cross-entropy w.r.t. the last layer."""
        self._require_white_box("gradient access")
        x = torch.as_tensor(x, dtype=torch.float32)
        y = torch.as_tensor(y, dtype=torch.long)
        prefix = _last_linear_name(self._model) + "."
        params = {k: v.detach() for k, v in self._model.named_parameters()}
        trainable = {k: v for k, v in params.items() if k.startswith(prefix)}
        frozen = {k: v for k, v in params.items() if not k.startswith(prefix)}
        buffers = dict(self._model.named_buffers())

        def sample_loss(p, xi, yi):
            out = functional_call(self._model, {**frozen, **p, **buffers}, (xi.unsqueeze(0),))
            return F.cross_entropy(out, yi.unsqueeze(0))

        per_sample = vmap(grad(sample_loss), in_dims=(None, 0, 0))
        rows = []
        with self._lock:
            for i in range(0, len(x), self.batch_size):
                g = per_sample(trainable, x[i : i + self.batch_size], y[i : i + self.batch_size])
                rows.append(torch.cat([g[k].flatten(1) for k in sorted(g)], dim=1))
        return torch.cat(rows)

    def embedding(self, x, layer: str | None = None) -> torch.Tensor:
        """Activations of a named layer, flattened per sample.

        Defaults to the architecture's second-to-last layer.
        """
        self._require_white_box("embedding access")
        layer = layer or getattr(self._model, "penultimate_layer", None)
        if layer is None:
            raise KeyError("no layer given and the model declares no penultimate_layer")
        target = _resolve_module(self._model, layer)
        x = torch.as_tensor(x, dtype=torch.float32)
        captured: list[torch.Tensor] = []
        # the hook must only live while we hold the lock, or other accessors' forwards trigger it
        with self._lock:
            handle = target.register_forward_hook(lambda m, i, o: captured.append(o.detach().flatten(1)))
            try:
                with torch.no_grad():
                    for i in range(0, len(x), self.batch_size):
                        self._model(x[i : i + self.batch_size])
            finally:
                handle.remove()
        return torch.cat(captured)

    def input_gradient(self, x, class_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (posteriors, d/dx of -log posterior[class_id]) for a batch."""
        self._require_white_box("input gradients")
        with self._lock:
            x = torch.as_tensor(x, dtype=torch.float32).clone().requires_grad_(True)
            logp = F.log_softmax(self._model(x), dim=1)
            (-logp[:, class_id].sum()).backward()
            return logp.detach().exp(), x.grad.detach()


def wrap_model(
    model: nn.Module,
    access,
    num_classes: int | None = None,
    architecture_id: str | None = None,
) -> TargetModelHandle:
    if not callable(getattr(model, "forward", None)):
        raise TypeError("model must expose forward inference")
    access = Access(access)
    if num_classes is None:
        num_classes = getattr(model, "num_classes", None)
    if num_classes is None:
        raise ValueError("num_classes is required when the model does not declare it")
    if architecture_id is None:
        architecture_id = getattr(model, "architecture_id", type(model).__name__)
    if access is Access.WHITE_BOX and not any(p.requires_grad for p in model.parameters()):
        raise CapabilityError("white-box access needs a differentiable model with parameters")
    return TargetModelHandle(model, access, num_classes, architecture_id)

