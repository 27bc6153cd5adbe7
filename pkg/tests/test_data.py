import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskprobe.data import (
    PART_NAMES,
    LabeledImageDataset,
    load_dataset,
    load_npz,
    make_synthetic_dataset,
    manifest_hash,
    partial_subset,
    quad_split,
    split_from_manifest,
    split_manifest,
    write_manifest,
)
from riskprobe.errors import ConfigError, DatasetTooSmall, InvalidFraction


def _dataset(n, num_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, 1, 32, 32)).astype(np.float32)
    labels = rng.integers(0, num_classes, size=n)
    return LabeledImageDataset(images, labels, num_classes)


def test_thousand_samples_split_into_four_quarters():
    split = quad_split(_dataset(1000), seed=3)
    assert [len(p) for p in split.parts().values()] == [250] * 4


def test_remainder_goes_to_target_train_first():
    assert [len(p) for p in quad_split(_dataset(1001), 0).parts().values()] == [251, 250, 250, 250]
    assert [len(p) for p in quad_split(_dataset(1003), 0).parts().values()] == [251, 251, 251, 250]


def test_split_is_deterministic_and_seed_dependent():
    ds = _dataset(400)
    a, b, c = quad_split(ds, 7), quad_split(ds, 7), quad_split(ds, 8)
    for name in PART_NAMES:
        assert np.array_equal(getattr(a, name).ids, getattr(b, name).ids)
    assert not np.array_equal(a.target_train.ids, c.target_train.ids)


def test_too_small_dataset_rejected():
    with pytest.raises(DatasetTooSmall):
        quad_split(_dataset(3), 0)


@given(st.integers(4, 300), st.integers(1, 6), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_split_partition_invariants(n, k, seed):
    ds = _dataset(n, k, seed % 97)
    split = quad_split(ds, seed)
    ids = [set(p.ids.tolist()) for p in split.parts().values()]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not ids[i] & ids[j]
    assert set().union(*ids) == set(ds.ids.tolist())
    sizes = [len(p) for p in split.parts().values()]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == n


def test_split_is_stratified():
    ds = _dataset(1200, 4)
    counts = np.bincount(ds.labels, minlength=4)
    for part in quad_split(ds, 1).parts().values():
        assert np.all(np.abs(np.bincount(part.labels, minlength=4) - counts / 4) <= 1)


def test_partial_subset_seventy_percent():
    split = quad_split(_dataset(1000), 0)
    part = partial_subset(split, 0.7, seed=1)
    assert len(part) == 175
    assert set(part.ids) <= set(split.target_train.ids)
    assert len(set(part.ids)) == 175


def test_partial_subset_full_fraction_is_target_train():
    split = quad_split(_dataset(100), 0)
    assert set(partial_subset(split, 1.0, 0).ids) == set(split.target_train.ids)


@pytest.mark.parametrize("fraction", [0, -0.1, 1.5])
def test_invalid_fraction(fraction):
    with pytest.raises(InvalidFraction):
        partial_subset(quad_split(_dataset(40), 0), fraction)


@given(st.integers(4, 200), st.floats(0.01, 1.0), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_partial_subset_floor_size(n, fraction, seed):
    split = quad_split(_dataset(n), seed)
    part = partial_subset(split, fraction, seed)
    expected = int(np.floor(fraction * len(split.target_train) + 1e-9))
    assert len(part) == expected
    assert set(part.ids) <= set(split.target_train.ids)


def test_synthetic_dataset_balance_and_attribute():
    ds = make_synthetic_dataset(4, 1, 400, seed=5)
    assert ds.images.shape == (400, 3, 32, 32)
    assert np.array_equal(np.bincount(ds.labels), [100] * 4)
    a = ds.attributes["attr0"]
    assert a.shape == (400,) and set(np.unique(a)) <= {0, 1}


def test_synthetic_dataset_normalized_per_channel():
    ds = make_synthetic_dataset(3, 0, 300, seed=2)
    assert np.allclose(ds.images.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(ds.images.std(axis=(0, 2, 3)), 1, atol=1e-3)
    assert np.allclose(ds.denormalize(ds.images).mean(axis=(0, 2, 3)), ds.mean, atol=1e-3)


def _least_squares_probe_accuracy(train, test, attr):
    """Closed-form ridge probe on raw pixels: the attribute attainability oracle."""
    X = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    y = 2.0 * train.attributes[attr] - 1
    w = np.linalg.solve(X.T @ X + 1e-1 * np.eye(X.shape[1]), X.T @ y)
    Xt = np.c_[test.images.reshape(len(test), -1), np.ones(len(test))]
    return float(((Xt @ w > 0) == test.attributes[attr]).mean())


def test_planted_attribute_is_linearly_decodable():
    ds = make_synthetic_dataset(4, 1, 4000, seed=0)
    train, test = ds.subset(np.arange(3000)), ds.subset(np.arange(3000, 4000))
    assert _least_squares_probe_accuracy(train, test, "attr0") > 0.9


def test_manifest_round_trip(tmp_path):
    ds = make_synthetic_dataset(3, 1, 90, seed=1)
    split = quad_split(ds, 4)
    manifest = split_manifest(ds, split)
    assert manifest["stratified"] is True
    assert manifest["normalization"]["mean"] == list(ds.mean)
    write_manifest(manifest, tmp_path / "m.json")
    loaded = json.loads((tmp_path / "m.json").read_text())
    assert manifest_hash(loaded) == manifest_hash(manifest)
    rebuilt = split_from_manifest(ds, loaded)
    for name in PART_NAMES:
        assert np.array_equal(getattr(rebuilt, name).images, getattr(split, name).images)


def test_manifest_rejects_other_dataset():
    ds = make_synthetic_dataset(3, 1, 90, seed=1)
    manifest = split_manifest(ds, quad_split(ds, 0))
    with pytest.raises(ConfigError):
        split_from_manifest(make_synthetic_dataset(3, 1, 90, seed=2), manifest)


def test_invalid_datasets_rejected():
    with pytest.raises(ValueError):
        LabeledImageDataset(np.zeros((2, 1, 32, 32), np.float32), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        LabeledImageDataset(np.zeros((2, 1, 28, 28), np.float32), np.array([0, 1]), 3)
    with pytest.raises(ValueError):
        LabeledImageDataset(np.zeros((2, 1, 32, 32), np.float32), np.array([0, 1]), 3, {"a": np.array([1])})


def test_npz_loader_resizes_and_reads_attributes(tmp_path):
    rng = np.random.default_rng(0)
    np.savez(
        tmp_path / "faces.npz",
        images=rng.random((10, 3, 28, 28)).astype(np.float32),
        labels=np.arange(10) % 2,
        attr_smiling=np.arange(10) % 2,
    )
    ds = load_npz(str(tmp_path / "faces.npz"))
    assert ds.images.shape == (10, 3, 32, 32)
    assert ds.num_classes == 2 and "smiling" in ds.attributes
    assert load_dataset("npz", path=str(tmp_path / "faces.npz")).content_hash() == ds.content_hash()


def test_unknown_dataset_name():
    with pytest.raises(ConfigError):
        load_dataset("imagenet")


def test_fmnist_idx_loader(tmp_path):
    from riskprobe.data import load_fmnist

    def idx(path, arr):
        header = bytes([0, 0, 8, arr.ndim]) + b"".join(d.to_bytes(4, "big") for d in arr.shape)
        path.write_bytes(header + arr.astype(np.uint8).tobytes())

    rng = np.random.default_rng(0)
    for split, n in (("train", 6), ("t10k", 2)):
        idx(tmp_path / f"{split}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        idx(tmp_path / f"{split}-labels-idx1-ubyte", np.arange(n) % 10)
    ds = load_fmnist(str(tmp_path))
    assert ds.images.shape == (8, 1, 32, 32) and ds.num_classes == 10
