import numpy as np
import pytest
import torch
from torch import nn

from riskprobe.data import LabeledImageDataset, make_synthetic_dataset
from riskprobe.errors import ConfigError, EmptyDataset, ShapeMismatch
from riskprobe.models import (
    ARCHITECTURES,
    Loss,
    ModelSpec,
    Optimizer,
    SimpleCNN,
    TrainConfig,
    load_checkpoint,
    default_train_config,
    register_architecture,
    save_checkpoint,
    spec_for,
    state_hash,
    train_classifier,
    train_shadow,
)


def test_default_train_config():
    cfg = default_train_config()
    assert cfg.epochs == 300 and cfg.batch_size == 64
    assert cfg.optimizer is Optimizer.SGD_MOMENTUM and cfg.momentum == 0.9
    assert cfg.weight_decay == 5e-4 and cfg.loss is Loss.CROSS_ENTROPY
    assert cfg.lr_schedule == [(0, 1e-2), (50, 1e-3), (100, 1e-4)]


@pytest.mark.parametrize(
    "epoch,lr", [(0, 1e-2), (49, 1e-2), (50, 1e-3), (99, 1e-3), (100, 1e-4), (299, 1e-4)]
)
def test_lr_schedule_boundaries(epoch, lr):
    assert default_train_config().lr_at(epoch) == lr


@pytest.mark.parametrize(
    "kwargs",
    [
        {"epochs": 0},
        {"batch_size": 0},
        {"lr_schedule": [(1, 0.1)]},
        {"lr_schedule": [(0, 0.1), (5, 0.01), (5, 0.001)]},
        {"lr_schedule": [(0, 0.0)]},
        {"optimizer": "rmsprop"},
    ],
)
def test_invalid_train_configs(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        TrainConfig(**kwargs)


def test_simple_cnn_layout():
    m = SimpleCNN(3, 10)
    convs = [x for x in m.modules() if isinstance(x, nn.Conv2d)]
    fcs = [x for x in m.modules() if isinstance(x, nn.Linear)]
    assert len(convs) == 2 and len(fcs) == 2
    assert [c.out_channels for c in convs] == [32, 64]
    assert fcs[0].out_features == 128
    assert m(torch.zeros(2, 3, 32, 32)).shape == (2, 10)
    assert SimpleCNN(1, 4)(torch.zeros(1, 1, 32, 32)).shape == (1, 4)


def test_registry_is_pluggable():
    register_architecture("tiny_linear", lambda c, k: nn.Sequential(nn.Flatten(), nn.Linear(c * 32 * 32, k)))
    try:
        m = ModelSpec("tiny_linear", 3, (1, 32, 32)).build(seed=0)
        assert m.architecture_id == "tiny_linear" and m.num_classes == 3
    finally:
        del ARCHITECTURES["tiny_linear"]
    with pytest.raises(ConfigError):
        ModelSpec("nope", 3).build()


def test_build_is_seeded():
    a, b = ModelSpec().build(seed=3), ModelSpec().build(seed=3)
    assert state_hash(a) == state_hash(b)
    assert state_hash(a) != state_hash(ModelSpec().build(seed=4))


def _blobs(n=80, seed=0):
    """Two classes separated along one pixel direction."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(scale=0.3, size=(n, 1, 32, 32)).astype(np.float32)
    images[:, 0, 10:20, 10:20] += (2 * labels - 1)[:, None, None] * 1.5
    return LabeledImageDataset(images, labels, 2)


def test_blobs_are_linearly_separable():
    # oracle: the mean-difference direction classifies every sample
    ds = _blobs()
    x = ds.images.reshape(len(ds), -1)
    w = x[ds.labels == 1].mean(0) - x[ds.labels == 0].mean(0)
    b = -w @ (x[ds.labels == 1].mean(0) + x[ds.labels == 0].mean(0)) / 2
    assert np.all(((x @ w + b) > 0) == ds.labels)


def test_separable_blobs_reach_full_train_accuracy():
    ds = _blobs()
    cfg = TrainConfig(epochs=50, lr_schedule=[(0, 1e-2)], seed=0)
    r = train_classifier(spec_for(ds, "simple_cnn_small"), ds, ds, cfg)
    assert r.train_acc == 1.0
    assert len(r.history) == 50


def test_training_is_deterministic():
    ds = _blobs(40)
    cfg = TrainConfig(epochs=3, seed=1)
    a = train_classifier(spec_for(ds, "simple_cnn_small"), ds, ds, cfg)
    b = train_classifier(spec_for(ds, "simple_cnn_small"), ds, ds, cfg)
    assert state_hash(a.model) == state_hash(b.model)
    assert a.history == b.history


def test_empty_and_mismatched_datasets():
    ds = _blobs(8)
    with pytest.raises(EmptyDataset):
        train_classifier(spec_for(ds), ds.subset([]), ds, TrainConfig(epochs=1))
    with pytest.raises(ShapeMismatch):
        train_classifier(ModelSpec("simple_cnn", 5, (1, 32, 32)), ds, ds, TrainConfig(epochs=1))
    with pytest.raises(ShapeMismatch):
        train_classifier(ModelSpec("simple_cnn", 2, (3, 32, 32)), ds, ds, TrainConfig(epochs=1))


def test_shadow_shares_architecture_but_not_weights(tiny_split):
    spec = spec_for(tiny_split.target_train, "simple_cnn_small")
    cfg = TrainConfig(epochs=2, seed=5)
    target = train_classifier(spec, tiny_split.target_train, tiny_split.target_test, cfg).model
    shadow = train_shadow(spec, tiny_split.shadow_train, tiny_split.shadow_test, cfg)
    assert shadow.architecture_id == target.architecture_id
    assert state_hash(shadow) != state_hash(target)


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec("simple_cnn_small", 4, (3, 32, 32))
    model = spec.build(seed=0)
    cfg = default_train_config(seed=2)
    save_checkpoint(tmp_path / "m.pt", model, spec, cfg, access="black_box", manifest_hash="abc")
    loaded, spec2, meta = load_checkpoint(tmp_path / "m.pt")
    assert spec2 == spec
    assert state_hash(loaded) == state_hash(model) == meta["weights_hash"]
    assert meta["train_config"]["lr_schedule"] == [[0, 1e-2], [50, 1e-3], [100, 1e-4]]
    assert meta["access"] == "black_box" and meta["manifest_hash"] == "abc"


def test_longer_training_overfits_more():
    ds = make_synthetic_dataset(4, 0, 400, seed=0, noise=6.0)
    train, test = ds.subset(np.arange(100)), ds.subset(np.arange(100, 400))
    spec = spec_for(ds, "simple_cnn_small")
    short = train_classifier(spec, train, test, TrainConfig(epochs=2, lr_schedule=[(0, 1e-2)], seed=0))
    long = train_classifier(spec, train, test, TrainConfig(epochs=60, lr_schedule=[(0, 1e-2)], seed=0))
    assert long.train_acc - long.test_acc > short.train_acc - short.test_acc
