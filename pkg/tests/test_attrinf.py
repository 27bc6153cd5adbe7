import numpy as np
import pytest
import torch

from riskprobe.access import wrap_model
from riskprobe.attacks import attrinf
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import CapabilityError, DegenerateLabels
from riskprobe.models import ModelSpec


def test_default_config():
    cfg = attrinf.AttrTrainConfig()
    assert (cfg.lr, cfg.epochs) == (1e-3, 50)
    m = attrinf.AttrInfAttackModel(128, 2)
    assert [l.out_features for l in m.net if isinstance(l, torch.nn.Linear)] == [64, 2]


def test_embedding_shapes_follow_architecture(tiny_ds):
    for arch, width in (("simple_cnn", 128), ("simple_cnn_small", 64)):
        handle = wrap_model(ModelSpec(arch, 4, (3, 32, 32)).build(seed=0), "white_box")
        emb = attrinf.extract_embeddings(handle, tiny_ds.subset(range(10)))
        assert emb.shape == (10, width)


def test_identical_samples_identical_rows(small_model, tiny_ds):
    x = np.repeat(tiny_ds.images[:1], 3, axis=0)
    emb = attrinf.extract_embeddings(wrap_model(small_model, "white_box"), x)
    assert np.array_equal(emb[0], emb[1]) and np.array_equal(emb[1], emb[2])


def test_embeddings_match_truncated_forward(small_model, tiny_ds):
    x = torch.from_numpy(tiny_ds.images[:8])
    m = small_model
    with torch.no_grad():
        h = m.pool(torch.relu(m.conv1(x)))
        h = m.pool(torch.relu(m.conv2(h)))
        h = torch.relu(m.fc1(h.flatten(1)))
    emb = attrinf.extract_embeddings(wrap_model(m, "white_box"), x.numpy())
    assert np.allclose(emb, h.numpy(), atol=1e-5)


def test_black_box_handle_rejected(small_model, tiny_ds):
    with pytest.raises(CapabilityError):
        attrinf.extract_embeddings(wrap_model(small_model, "black_box"), tiny_ds)


def test_single_value_labels_rejected():
    with pytest.raises(DegenerateLabels):
        attrinf.train_attrinf(np.zeros((5, 3)), np.ones(5))


def test_compose_attributes_bits(tiny_ds):
    y = attrinf.compose_attributes(tiny_ds, ["attr0", "attr1"])
    assert np.array_equal(y, tiny_ds.attributes["attr0"] + 2 * tiny_ds.attributes["attr1"])
    assert set(np.unique(y)) <= {0, 1, 2, 3}


def test_constant_predictor_on_balanced_attribute():
    post = np.tile([[0.9, 0.1]], (10, 1))
    out = attrinf.attribute_metrics(post, np.array([0, 1] * 5))
    assert out["acc"] == 0.5 and "f1" in out
    multi = attrinf.attribute_metrics(np.tile([[0.7, 0.1, 0.1, 0.1]], (8, 1)), np.arange(8) % 4)
    assert multi["acc"] == 0.25 and "macro_f1" in multi


def test_attack_learns_linearly_encoded_attribute():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    emb = rng.normal(size=(400, 16)) + 3.0 * y[:, None] * np.eye(16)[0]
    model = attrinf.train_attrinf(emb[:300], y[:300], attrinf.AttrTrainConfig(epochs=30))
    post = model.posteriors(emb[300:])
    assert np.allclose(post.sum(1), 1, atol=1e-6)
    assert attrinf.attribute_metrics(post, y[300:])["acc"] > 0.85


def test_run_attack_only_reads_aux_attributes(small_model, tiny_split):
    handle = wrap_model(small_model, "white_box")
    ev = tiny_split.target_test
    scrambled = LabeledImageDataset(ev.images, ev.labels, ev.num_classes, {k: np.zeros_like(v) for k, v in ev.attributes.items()}, ev.ids)
    a = attrinf.run_attack(handle, tiny_split.shadow_train, ev, ["attr0"], attrinf.AttrTrainConfig(epochs=3))
    b = attrinf.run_attack(handle, tiny_split.shadow_train, scrambled, ["attr0"], attrinf.AttrTrainConfig(epochs=3))
    # identical predictions; only the scoring labels differ
    assert set(a) == {"acc", "f1"}
    zero_acc = b["acc"]
    assert 0 <= zero_acc <= 1
