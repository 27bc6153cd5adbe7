"""DP-SGD with zCDP accounting, and knowledge distillation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad, vmap

from riskprobe.data import LabeledImageDataset
from riskprobe.errors import InfeasibleBudget, InvalidBudget, ShapeMismatch
from riskprobe.models import ModelSpec, TrainConfig, TrainResult, _check_compatible, accuracy, fit, make_optimizer

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gaussian mechanism and clipping


def clip_gradient(g, C: float):
    """Scale ``g`` by ``1 / max(1, ||g||_2 / C)``; works on numpy arrays and tensors."""
    if C <= 0:
        raise InvalidBudget("clip norm must be positive")
    if isinstance(g, torch.Tensor):
        norm = torch.linalg.vector_norm(g)
        return g / torch.clamp(norm / C, min=1.0)
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / C)


def gaussian_sigma_single(epsilon: float, delta: float) -> float:
    """Noise multiplier of the classic one-shot Gaussian mechanism."""
    if epsilon <= 0:
        raise InvalidBudget("epsilon must be positive")
    if not 0 < delta < 1:
        raise InvalidBudget("delta must lie in (0, 1)")
    return math.sqrt(2 * math.log(1.25 / delta)) / epsilon


# ---------------------------------------------------------------------------
# zCDP accounting


def gaussian_rho(sigma: float) -> float:
    """zCDP cost of one Gaussian release with noise multiplier ``sigma``."""
    return math.inf if sigma == 0 else 1.0 / (2.0 * sigma**2)


def zcdp_to_epsilon(rho: float, delta: float) -> float:
    if not 0 < delta < 1:
        raise InvalidBudget("delta must lie in (0, 1)")
    if math.isinf(rho):
        return math.inf
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def zcdp_epsilon(sigma: float, delta: float, steps: int) -> float:
    """Total epsilon after ``steps`` Gaussian releases."""
    return zcdp_to_epsilon(steps * gaussian_rho(sigma), delta)


def zcdp_sigma_for_budget(
    epsilon: float,
    delta: float,
    T: int,
    C: float = 1.0,
    lo: float = 1e-6,
    hi: float = 1e9,
    rtol: float = 1e-6,
) -> float:
    """Smallest noise multiplier whose T-fold composition fits (epsilon, delta).

    The multiplier does not depend on ``C``: the noise standard deviation
    added to a gradient clipped at ``C`` is ``C * sigma``.  Solved by
    geometric bisection, since epsilon is strictly decreasing in sigma.
    """
    if epsilon <= 0 or T < 1 or C <= 0:
        raise InvalidBudget("epsilon, T and C must be positive")
    if not 0 < delta < 1:
        raise InvalidBudget("delta must lie in (0, 1)")
    if zcdp_epsilon(hi, delta, T) > epsilon:
        raise InfeasibleBudget(f"no sigma <= {hi:g} reaches epsilon={epsilon:g} over {T} steps")
    if zcdp_epsilon(lo, delta, T) <= epsilon:
        return lo
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if zcdp_epsilon(mid, delta, T) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5
    clip_C: float = 1.0
    sigma: float | None = None
    steps_T: int | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InvalidBudget("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise InvalidBudget("delta must lie in (0, 1)")
        if self.clip_C <= 0:
            raise InvalidBudget("clip_C must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise InvalidBudget("sigma must be non-negative")
        if self.steps_T is not None and self.steps_T < 1:
            raise InvalidBudget("steps_T must be >= 1")

    def resolve(self, steps: int) -> "PrivacyBudget":
        """Fill in T and, when absent, the smallest sigma affording T steps."""
        T = self.steps_T or steps
        sigma = self.sigma if self.sigma is not None else zcdp_sigma_for_budget(self.epsilon, self.delta, T)
        return PrivacyBudget(self.epsilon, self.delta, self.clip_C, sigma, T)


class ZCDPAccountant:
    """Sequential ledger of Gaussian releases; single writer."""

    def __init__(self, delta: float):
        self.delta = delta
        self.rho = 0.0
        self.entries: list[dict] = []

    @property
    def steps(self) -> int:
        return len(self.entries)

    @property
    def epsilon(self) -> float:
        return zcdp_to_epsilon(self.rho, self.delta) if self.entries else 0.0

    def epsilon_after(self, sigma: float, steps: int = 1) -> float:
        return zcdp_to_epsilon(self.rho + steps * gaussian_rho(sigma), self.delta)

    def step(self, sigma: float, clip_C: float) -> None:
        rho = gaussian_rho(sigma)
        self.rho += rho
        eps = zcdp_to_epsilon(self.rho, self.delta)
        self.entries.append({"step": self.steps + 1, "sigma": sigma, "C": clip_C, "rho": rho, "epsilon": eps})

    def to_dict(self) -> dict:
        return {"delta": self.delta, "rho": self.rho, "epsilon": _json_float(self.epsilon), "steps": self.entries}

    def write(self, path) -> None:
        entries = [{**e, "epsilon": _json_float(e["epsilon"])} for e in self.entries]
        Path(path).write_text(json.dumps({**self.to_dict(), "steps": entries}, indent=1))


def _json_float(x: float):
    return "inf" if math.isinf(x) else x


# ---------------------------------------------------------------------------
# DP-SGD


class GradientPrivatizer:
    """Clip per-sample gradients, sum, add N(0, (C sigma)^2 I), average.

    Every call draws fresh noise from its own generator.
    """

    def __init__(self, clip_C: float, sigma: float, seed: int):
        self.clip_C = clip_C
        self.sigma = sigma
        self.generator = torch.Generator().manual_seed(seed)

    def __call__(self, per_sample: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        names = list(per_sample)
        batch = per_sample[names[0]].shape[0]
        flat = torch.cat([per_sample[k].reshape(batch, -1) for k in names], dim=1)
        norms = torch.linalg.vector_norm(flat, dim=1)
        scale = 1.0 / torch.clamp(norms / self.clip_C, min=1.0)
        out = {}
        for k in names:
            g = per_sample[k]
            summed = (g * scale.view(-1, *([1] * (g.dim() - 1)))).sum(0)
            if self.sigma > 0:
                noise = torch.randn(summed.shape, generator=self.generator) * (self.clip_C * self.sigma)
                summed = summed + noise
            out[k] = summed / batch
        return out


@dataclass
class DPResult:
    model: nn.Module
    train_acc: float
    test_acc: float
    budget: PrivacyBudget
    epsilon_spent: float
    steps: int
    stopped_early: bool
    accountant: ZCDPAccountant = field(repr=False)


def train_dpsgd(
    spec: ModelSpec,
    train_ds: LabeledImageDataset,
    test_ds: LabeledImageDataset,
    cfg: TrainConfig,
    budget: PrivacyBudget,
) -> DPResult:
    """Train with per-sample clipping and Gaussian noise.

    Batches are fixed-size shuffled mini-batches; each counts as one full
    Gaussian release in the accountant.  When the next step would exceed the
    budget, training stops and the current model is returned.
    """
    _check_compatible(spec, train_ds)
    x, y = train_ds.tensors()
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    budget = budget.resolve(cfg.epochs * steps_per_epoch)
    model = spec.build(seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    privatize = GradientPrivatizer(budget.clip_C, budget.sigma, seed=cfg.seed + 1)
    accountant = ZCDPAccountant(budget.delta)
    enforce = budget.sigma > 0
    if not enforce:
        log.warning("sigma=0: clipped SGD without noise, epsilon is infinite")

    buffers = {k: v for k, v in model.named_buffers()}

    def sample_loss(params, xi, yi):
        out = functional_call(model, {**params, **buffers}, (xi.unsqueeze(0),))
        return F.cross_entropy(out, yi.unsqueeze(0))

    per_sample_grad = vmap(grad(sample_loss), in_dims=(None, 0, 0))
    gen = torch.Generator().manual_seed(cfg.seed)
    stopped = False
    model.train()
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), cfg.batch_size):
            if accountant.steps >= budget.steps_T or (
                enforce and accountant.epsilon_after(budget.sigma) > budget.epsilon * (1 + 1e-9)
            ):
                stopped = True
                break
            idx = perm[start : start + cfg.batch_size]
            params = {k: v.detach() for k, v in model.named_parameters()}
            grads = privatize(per_sample_grad(params, x[idx], y[idx]))
            for k, p in model.named_parameters():
                p.grad = grads[k]
            opt.step()
            accountant.step(budget.sigma, budget.clip_C)
        if stopped:
            log.info("privacy budget reached after %d steps", accountant.steps)
            break
    model.eval()
    return DPResult(
        model=model,
        train_acc=accuracy(model, train_ds),
        test_acc=accuracy(model, test_ds),
        budget=budget,
        epsilon_spent=accountant.epsilon,
        steps=accountant.steps,
        stopped_early=stopped,
        accountant=accountant,
    )


# ---------------------------------------------------------------------------
# knowledge distillation


@dataclass
class DistillConfig:
    temperature: float = 20.0
    alpha: float = 0.7
    student_spec: ModelSpec | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


def soften(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    return F.softmax(logits / temperature, dim=1)


def distillation_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
    alpha: float,
) -> torch.Tensor:
    """alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * CE(student, labels)."""
    t = temperature
    soft = F.kl_div(
        F.log_softmax(student_logits / t, dim=1),
        F.log_softmax(teacher_logits / t, dim=1),
        reduction="batchmean",
        log_target=True,
    )
    hard = F.cross_entropy(student_logits, labels)
    return alpha * t * t * soft + (1 - alpha) * hard


@torch.no_grad()
def _logits(model: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def train_distilled(
    teacher_model: nn.Module,
    student_spec: ModelSpec,
    train_ds: LabeledImageDataset,
    cfg: TrainConfig,
    dcfg: DistillConfig,
    test_ds: LabeledImageDataset | None = None,
) -> TrainResult:
    """Train a student on the teacher's softened outputs plus the hard labels."""
    _check_compatible(student_spec, train_ds)
    x, y = train_ds.tensors()
    teacher_logits = _logits(teacher_model, x)
    if teacher_logits.shape[1] != student_spec.num_classes:
        raise ShapeMismatch("teacher and student disagree on the number of classes")
    student = student_spec.build(seed=cfg.seed)
    history = fit(
        student,
        x,
        y,
        cfg,
        lambda out, t, idx: distillation_loss(out, teacher_logits[idx], t, dcfg.temperature, dcfg.alpha),
    )
    test_acc = accuracy(student, test_ds) if test_ds is not None else float("nan")
    return TrainResult(student, accuracy(student, train_ds), test_acc, history)
