"""Image datasets and the four-way split shared by every attack."""

from __future__ import annotations

import gzip
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from riskprobe.errors import ConfigError, DatasetTooSmall, InvalidFraction

IMAGE_SIZE = 32
PART_NAMES = ("target_train", "target_test", "shadow_train", "shadow_test")


@dataclass
class LabeledImageDataset:
    """N x C x 32 x 32 normalized images with integer labels.

    ``ids`` are stable sample identities into the source dataset, so subsets
    can be checked for disjointness and replayed from index lists.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    ids: np.ndarray | None = None
    name: str = "dataset"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != n:
            raise ValueError(f"images must be N x C x H x W with N={n}, got {self.images.shape}")
        if self.images.shape[2:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {self.images.shape[2:]}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for k, v in self.attributes.items():
            if len(v) != n:
                raise ValueError(f"attribute {k!r} has {len(v)} entries, expected {n}")
        self.attributes = {k: np.asarray(v, dtype=np.int64) for k, v in self.attributes.items()}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "LabeledImageDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledImageDataset(
            images=self.images[index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            attributes={k: v[index] for k, v in self.attributes.items()},
            ids=self.ids[index],
            name=self.name,
            mean=self.mean,
            std=self.std,
        )

    def select_ids(self, ids) -> "LabeledImageDataset":
        pos = {int(i): p for p, i in enumerate(self.ids)}
        return self.subset([pos[int(i)] for i in ids])

    def concat(self, other: "LabeledImageDataset") -> "LabeledImageDataset":
        return LabeledImageDataset(
            images=np.concatenate([self.images, other.images]),
            labels=np.concatenate([self.labels, other.labels]),
            num_classes=self.num_classes,
            attributes={k: np.concatenate([v, other.attributes[k]]) for k, v in self.attributes.items()},
            ids=np.concatenate([self.ids, other.ids]),
            name=self.name,
            mean=self.mean,
            std=self.std,
        )

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)

    def denormalize(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if not self.mean:
            return images
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return images * std + mean

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels, self.ids, *[self.attributes[k] for k in sorted(self.attributes)]):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def normalize(images: np.ndarray) -> tuple[np.ndarray, tuple[float, ...], tuple[float, ...]]:
    """Per-channel standardization; returns the images and the constants used."""
    images = np.asarray(images, dtype=np.float32)
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std[std == 0] = 1.0
    out = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32), tuple(float(m) for m in mean), tuple(float(s) for s in std)


def resize(images: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    if images.shape[2:] == (size, size):
        return images
    t = F.interpolate(torch.from_numpy(images), size=(size, size), mode="bilinear", align_corners=False)
    return t.numpy()


def from_raw(images, labels, num_classes, name, attributes=None) -> LabeledImageDataset:
    """Resize raw images to 32x32 and standardize them."""
    images, mean, std = normalize(resize(images))
    return LabeledImageDataset(images, labels, num_classes, attributes or {}, name=name, mean=mean, std=std)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class QuadSplit:
    target_train: LabeledImageDataset
    target_test: LabeledImageDataset
    shadow_train: LabeledImageDataset
    shadow_test: LabeledImageDataset
    seed: int

    def parts(self) -> dict[str, LabeledImageDataset]:
        return {name: getattr(self, name) for name in PART_NAMES}


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Shuffled classes laid end to end: dealing positions round-robin then gives
    # every part floor or ceil of each class's quarter.
    classes = rng.permutation(np.unique(labels))
    return np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])


def quad_split(ds: LabeledImageDataset, seed: int) -> QuadSplit:
    """Split into four disjoint, class-stratified parts of (near) equal size.

    Positions in the stratified order are dealt round-robin, so remainder
    samples go to target_train, then target_test, then shadow_train.
    """
    if len(ds) < 4:
        raise DatasetTooSmall(f"need at least 4 samples to split, got {len(ds)}")
    rng = np.random.default_rng(seed)
    order = _stratified_order(ds.labels, rng)
    parts = [ds.subset(np.sort(order[k::4])) for k in range(4)]
    return QuadSplit(*parts, seed=seed)


def partial_subset(split: QuadSplit, fraction: float = 0.7, seed: int = 0) -> LabeledImageDataset:
    if not 0 < fraction <= 1:
        raise InvalidFraction(f"fraction must be in (0, 1], got {fraction}")
    train = split.target_train
    # tolerance guards float products such as 0.7 * 250
    k = math.floor(fraction * len(train) + 1e-9)
    rng = np.random.default_rng(seed)
    return train.subset(np.sort(rng.choice(len(train), size=k, replace=False)))


# ---------------------------------------------------------------------------
# synthetic data


def make_synthetic_dataset(
    num_classes: int,
    num_attrs: int,
    n: int,
    seed: int,
    *,
    channels: int = 3,
    noise: float = 1.0,
    signal: float = 1.0,
    attr_strength: float = 1.0,
) -> LabeledImageDataset:
    """Class-conditional Gaussian-blob images with planted binary attributes.

    Each class owns a blob (position, width, colour).  A sample is its class
    blob, spatially jittered, plus i.i.d. pixel noise.  Attribute ``j`` is an
    independent fair coin that shifts the mean of channel ``j % channels``
    by ``+-attr_strength / 2`` noise units.
    """
    if n < num_classes:
        raise ValueError("n must be at least num_classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float32)
    centers = rng.uniform(8, 24, size=(num_classes, 2))
    widths = rng.uniform(3.0, 6.0, size=num_classes)
    colours = rng.normal(size=(num_classes, channels))
    colours /= np.linalg.norm(colours, axis=1, keepdims=True)

    labels = np.arange(n) % num_classes
    labels = rng.permutation(labels)
    jitter = rng.normal(scale=1.5, size=(n, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blob = np.exp(
        -((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
        / (2 * widths[labels, None, None] ** 2)
    )
    images = signal * 2.0 * colours[labels][:, :, None, None] * blob[:, None]
    images = images + noise * rng.normal(size=(n, channels, IMAGE_SIZE, IMAGE_SIZE))

    attributes = {}
    for j in range(num_attrs):
        a = rng.integers(0, 2, size=n)
        images[:, j % channels] += (a[:, None, None] - 0.5) * attr_strength * noise
        attributes[f"attr{j}"] = a
    return from_raw(images.astype(np.float32), labels, num_classes, "synthetic", attributes)


# ---------------------------------------------------------------------------
# registry


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def load_fmnist(path: str) -> LabeledImageDataset:
    """Fashion-MNIST from the four standard idx files (optionally gzipped) in ``path``."""
    root = Path(path)

    def find(stem):
        for cand in (root / stem, root / f"{stem}.gz"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"{stem} not found under {root}")

    images = np.concatenate([_read_idx(find(f"{s}-images-idx3-ubyte")) for s in ("train", "t10k")])
    labels = np.concatenate([_read_idx(find(f"{s}-labels-idx1-ubyte")) for s in ("train", "t10k")])
    return from_raw(images.astype(np.float32) / 255.0, labels.astype(np.int64), 10, "fmnist")


def load_npz(path: str, num_classes: int | None = None) -> LabeledImageDataset:
    """Generic ``.npz`` with ``images``, ``labels`` and optional ``attr_<name>`` arrays."""
    with np.load(path) as z:
        images, labels = z["images"], z["labels"]
        attrs = {k[5:]: z[k] for k in z.files if k.startswith("attr_")}
    num_classes = num_classes or int(labels.max()) + 1
    return from_raw(images, labels, num_classes, Path(path).stem, attrs)


DATASETS: dict[str, Callable[..., LabeledImageDataset]] = {
    "synthetic": make_synthetic_dataset,
    "fmnist": load_fmnist,
    "npz": load_npz,
}


def load_dataset(name: str, **kwargs) -> LabeledImageDataset:
    """Load a dataset by registry name.  Local files only; nothing is downloaded."""
    try:
        loader = DATASETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; known: {sorted(DATASETS)}") from None
    return loader(**kwargs)


# ---------------------------------------------------------------------------
# manifest


def split_manifest(ds: LabeledImageDataset, split: QuadSplit, source: dict | None = None) -> dict:
    return {
        "name": ds.name,
        "num_classes": ds.num_classes,
        "normalization": {"mean": list(ds.mean), "std": list(ds.std)},
        "attribute_names": sorted(ds.attributes),
        "split_seed": split.seed,
        "stratified": True,
        "source": source or {},
        "dataset_hash": ds.content_hash(),
        "parts": {name: part.ids.tolist() for name, part in split.parts().items()},
    }


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1))


def split_from_manifest(ds: LabeledImageDataset, manifest: dict) -> QuadSplit:
    """Rebuild a split from the authoritative index lists of a manifest."""
    if manifest.get("dataset_hash") not in (None, ds.content_hash()):
        raise ConfigError("dataset content does not match the manifest")
    parts = [ds.select_ids(manifest["parts"][name]) for name in PART_NAMES]
    return QuadSplit(*parts, seed=manifest["split_seed"])
