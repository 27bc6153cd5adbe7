"""Model inversion: gradient descent on the input, and GAN latent search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from riskprobe import metrics
from riskprobe.access import TargetModelHandle
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import CapabilityError, ClassMissing, DatasetTooSmall

log = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    threshold: float = 0.999
    lr: float = 1e-2
    max_iter: int = 3000
    early_stop_patience: int = 100

    def __post_init__(self):
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class InversionResult:
    class_id: int
    image: np.ndarray
    iterations: int
    posterior: float
    stop_reason: str
    loss_history: list[float] = field(default_factory=list, repr=False)


def invert_class(
    handle: TargetModelHandle,
    class_id: int,
    cfg: InversionConfig | None = None,
    seed: int = 0,
    input_shape: tuple[int, ...] = (3, 32, 32),
) -> InversionResult:
    """Optimize an input until the target class posterior reaches the threshold.

    Starts from an all-zero image and runs plain gradient descent on
    ``-log p(class | x)``.  Stops at the threshold, after
    ``early_stop_patience`` iterations without a new best loss, or at
    ``max_iter``; the best input seen is returned.  ``seed`` is accepted for
    interface symmetry; the zero start makes the search deterministic.
    """
    cfg = cfg or InversionConfig()
    if not handle.white_box:
        raise CapabilityError("model inversion needs white-box access")
    x = torch.zeros((1, *input_shape))
    best_x, best_loss, best_post = x.clone(), float("inf"), 0.0
    since_best = 0
    history: list[float] = []
    reason = "max_iter"
    it = 0
    for it in range(cfg.max_iter + 1):
        post, g = handle.input_gradient(x, class_id)
        p = float(post[0, class_id])
        loss = -float(np.log(max(p, 1e-45)))
        history.append(loss)
        if loss < best_loss:
            best_x, best_loss, best_post, since_best = x.clone(), loss, p, 0
        else:
            since_best += 1
        if p >= cfg.threshold:
            reason = "threshold"
            break
        if since_best >= cfg.early_stop_patience:
            reason = "early_stop"
            break
        if it == cfg.max_iter:
            break
        x = x - cfg.lr * g
    return InversionResult(class_id, best_x[0].numpy(), it, best_post, reason, history)


def class_means(ds: LabeledImageDataset, classes=None) -> dict[int, np.ndarray]:
    classes = range(ds.num_classes) if classes is None else classes
    out = {}
    for c in classes:
        mask = ds.labels == c
        if not mask.any():
            raise ClassMissing(f"class {c} has no samples")
        out[int(c)] = ds.images[mask].mean(axis=0)
    return out


def eval_inversion_mse(reconstructions: dict[int, np.ndarray], dataset: LabeledImageDataset) -> float:
    """Mean over classes of the MSE between reconstruction and class-average image.

    Both sides are denormalized with the dataset's mean/std first, so the
    error is in raw pixel units; datasets without constants compare as-is.
    """
    means = class_means(dataset, sorted(reconstructions))
    errors = [
        metrics.mse(dataset.denormalize(reconstructions[c][None]), dataset.denormalize(means[c][None]))
        for c in sorted(reconstructions)
    ]
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# GAN-based inversion


class Generator(nn.Module):
    """DCGAN generator, noise_dim -> C x 32 x 32 in [-1, 1]."""

    def __init__(self, noise_dim: int = 100, channels: int = 3, width: int = 64):
        super().__init__()
        self.noise_dim = noise_dim
        w = width
        self.net = nn.Sequential(
            nn.ConvTranspose2d(noise_dim, w * 4, 4, 1, 0, bias=False),
            nn.BatchNorm2d(w * 4),
            nn.ReLU(True),
            nn.ConvTranspose2d(w * 4, w * 2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(w * 2),
            nn.ReLU(True),
            nn.ConvTranspose2d(w * 2, w, 4, 2, 1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(True),
            nn.ConvTranspose2d(w, channels, 4, 2, 1, bias=False),
            nn.Tanh(),
        )

    def forward(self, z):
        return self.net(z.view(len(z), self.noise_dim, 1, 1))


class Discriminator(nn.Module):
    """DCGAN discriminator returning one realness logit per image."""

    def __init__(self, channels: int = 3, width: int = 64):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(channels, w, 4, 2, 1, bias=False),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(w, w * 2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(w * 2),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * 2, w * 4, 4, 2, 1, bias=False),
            nn.BatchNorm2d(w * 4),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * 4, 1, 4, 1, 0, bias=False),
        )

    def forward(self, x):
        return self.net(x).view(-1)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
    elif isinstance(m, nn.BatchNorm2d):
        nn.init.normal_(m.weight, 1.0, 0.02)
        nn.init.zeros_(m.bias)


@dataclass
class GanInversionConfig:
    """GAN training plus latent-search settings."""

    noise_dim: int = 100
    lr: float = 1e-3
    momentum: float = 0.9
    lambda_ratio: float = 100.0
    iters: int = 1500
    clip_range: float = 1.0
    # DCGAN training
    gan_epochs: int = 50
    gan_batch_size: int = 64
    gan_lr: float = 2e-4
    width: int = 64

    def __post_init__(self):
        for name in ("noise_dim", "lr", "momentum", "iters", "clip_range", "gan_epochs", "gan_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_ratio < 0:
            raise ValueError("lambda_ratio must be non-negative")


@dataclass
class InversionGAN:
    """Trained generator/discriminator plus the affine map into data space.

    The GAN works in [-1, 1]; ``lo``/``hi`` are per-channel bounds of the
    normalized training data used to map between the two ranges.
    """

    generator: Generator
    discriminator: Discriminator
    lo: torch.Tensor
    hi: torch.Tensor
    losses: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def __iter__(self):
        yield self.generator
        yield self.discriminator

    def to_gan_space(self, x: torch.Tensor) -> torch.Tensor:
        return 2 * (x - self.lo) / (self.hi - self.lo) - 1

    def to_data_space(self, x: torch.Tensor) -> torch.Tensor:
        return (x + 1) / 2 * (self.hi - self.lo) + self.lo

    def generate(self, z: torch.Tensor) -> torch.Tensor:
        """Images in the dataset's normalized space."""
        return self.to_data_space(self.generator(z))


def discriminator_step(D, G, real, opt, noise_dim, gen):
    z = torch.rand(len(real), noise_dim, generator=gen) * 2 - 1
    with torch.no_grad():
        fake = G(z)
    opt.zero_grad()
    loss = F.binary_cross_entropy_with_logits(D(real), torch.ones(len(real))) + F.binary_cross_entropy_with_logits(
        D(fake), torch.zeros(len(fake))
    )
    loss.backward()
    opt.step()
    return loss.item()


@torch.no_grad()
def discriminator_accuracy(D: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> float:
    D.eval()
    correct = (D(real) > 0).float().sum() + (D(fake) <= 0).float().sum()
    D.train()
    return float(correct / (len(real) + len(fake)))


def train_inversion_gan(shadow_train: LabeledImageDataset, cfg: GanInversionConfig | None = None, seed: int = 0) -> InversionGAN:
    cfg = cfg or GanInversionConfig()
    if len(shadow_train) < cfg.gan_batch_size:
        raise DatasetTooSmall(f"need at least {cfg.gan_batch_size} samples to train the GAN")
    torch.manual_seed(seed)
    x = torch.from_numpy(shadow_train.images)
    lo = x.amin(dim=(0, 2, 3)).view(1, -1, 1, 1)
    hi = x.amax(dim=(0, 2, 3)).view(1, -1, 1, 1)
    G = Generator(cfg.noise_dim, x.shape[1], cfg.width)
    D = Discriminator(x.shape[1], cfg.width)
    G.apply(_init_weights)
    D.apply(_init_weights)
    gan = InversionGAN(G, D, lo, hi)
    real_all = gan.to_gan_space(x)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.gan_lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.gan_lr, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(cfg.gan_epochs):
        perm = torch.randperm(len(x), generator=gen)
        # drop the ragged tail so batch norm never sees a single sample
        for start in range(0, len(x) - cfg.gan_batch_size + 1, cfg.gan_batch_size):
            real = real_all[perm[start : start + cfg.gan_batch_size]]
            d_loss = discriminator_step(D, G, real, opt_d, cfg.noise_dim, gen)
            z = torch.rand(len(real), cfg.noise_dim, generator=gen) * 2 - 1
            opt_g.zero_grad()
            g_loss = F.binary_cross_entropy_with_logits(D(G(z)), torch.ones(len(real)))
            g_loss.backward()
            opt_g.step()
        gan.losses.append((d_loss, g_loss.item()))
        log.debug("gan epoch %d: d=%.4f g=%.4f", epoch, d_loss, g_loss.item())
    G.eval()
    D.eval()
    return gan


@dataclass
class GanInversionResult:
    class_id: int
    images: np.ndarray
    latents: np.ndarray
    initial_posteriors: np.ndarray
    final_posteriors: np.ndarray


def gan_invert_class(
    handle: TargetModelHandle,
    gan: InversionGAN,
    class_id: int,
    cfg: GanInversionConfig | None = None,
    n_samples: int = 1,
    seed: int = 0,
) -> GanInversionResult:
    """Search the GAN latent space for samples the target assigns to ``class_id``.

    Minimizes ``-log D(G(z)) + lambda * CE(target(G(z)), class_id)`` with
    momentum SGD, clipping z to ``[-clip_range, clip_range]`` after each step.
    Samples are optimized jointly but their losses are summed, so each latent
    follows its own trajectory.
    """
    cfg = cfg or GanInversionConfig()
    if not handle.white_box:
        raise CapabilityError("GAN-based inversion needs white-box access")
    gen = torch.Generator().manual_seed(seed)
    z = (torch.rand(n_samples, cfg.noise_dim, generator=gen) * 2 - 1) * cfg.clip_range
    z.requires_grad_(True)
    G, D = gan.generator.eval(), gan.discriminator.eval()
    for p in [*G.parameters(), *D.parameters()]:
        p.requires_grad_(False)
    target = torch.full((n_samples,), class_id, dtype=torch.long)
    opt = torch.optim.SGD([z], lr=cfg.lr, momentum=cfg.momentum)

    with torch.no_grad():
        initial = handle.query(gan.generate(z))[:, class_id].numpy()
    for _ in range(cfg.iters):
        opt.zero_grad()
        fake = G(z)
        prior = F.softplus(-D(fake)).sum()  # -log sigmoid(D)
        loss = prior
        if cfg.lambda_ratio > 0:
            post = handle.posteriors(gan.to_data_space(fake))
            identity = F.nll_loss(torch.log(post.clamp_min(1e-12)), target, reduction="sum")
            loss = prior + cfg.lambda_ratio * identity
        loss.backward()
        opt.step()
        with torch.no_grad():
            z.clamp_(-cfg.clip_range, cfg.clip_range)
    with torch.no_grad():
        images = gan.generate(z)
        final = handle.query(images)[:, class_id].numpy()
    return GanInversionResult(class_id, images.numpy(), z.detach().numpy(), initial, final)


def eval_inversion_accuracy(reconstructions, intended_classes, eval_classifier: nn.Module) -> tuple[float, float]:
    """Accuracy and macro-F1 of an independent classifier on the reconstructions."""
    x = torch.as_tensor(np.asarray(reconstructions), dtype=torch.float32)
    y = np.asarray(intended_classes)
    eval_classifier.eval()
    with torch.no_grad():
        pred = eval_classifier(x).argmax(dim=1).numpy()
    num_classes = getattr(eval_classifier, "num_classes", None)
    return metrics.accuracy(pred, y), metrics.macro_f1(pred, y, num_classes)


def save_image_grid(images: np.ndarray, path, nrow: int = 8) -> None:
    """Write a PNG grid of C x H x W images (min-max scaled per image)."""
    from PIL import Image

    images = np.asarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    lo = images.reshape(n, -1).min(axis=1)[:, None, None, None]
    hi = images.reshape(n, -1).max(axis=1)[:, None, None, None]
    images = (images - lo) / np.where(hi > lo, hi - lo, 1.0)
    ncol = min(nrow, n)
    rows = -(-n // ncol)
    grid = np.zeros((c, rows * (h + 2) + 2, ncol * (w + 2) + 2), dtype=np.float32)
    for i, img in enumerate(images):
        r, col = divmod(i, ncol)
        grid[:, 2 + r * (h + 2) : 2 + r * (h + 2) + h, 2 + col * (w + 2) : 2 + col * (w + 2) + w] = img
    arr = (grid * 255).round().astype(np.uint8)
    arr = arr[0] if c == 1 else arr[:3].transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
