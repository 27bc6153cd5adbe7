import numpy as np
import pytest
import torch

from riskprobe import metrics
from riskprobe.access import wrap_model
from riskprobe.attacks import modinv
from riskprobe.data import LabeledImageDataset
from riskprobe.errors import CapabilityError, ClassMissing, DatasetTooSmall

from helpers import LinearSoftmax, orthogonal_linear


def _analytic_iterations(row_norm, lr, threshold, num_classes):
    """Gradient-descent steps to reach ``threshold`` on an orthogonal linear model.

    With orthogonal rows of norm r and a zero start, x stays in the span of
    the rows, the target logit grows by lr * r^2 * (1 - p) per step and the
    others shrink by lr * r^2 * p_j.  Iterate the scalar recursion exactly.
    """
    a, b = 0.0, 0.0  # target logit, common off-target logit
    for it in range(100_000):
        p = 1 / (1 + (num_classes - 1) * np.exp(b - a))
        if p >= threshold:
            return it
        q = (1 - p) / (num_classes - 1)
        a += lr * row_norm**2 * (1 - p)
        b -= lr * row_norm**2 * q
    raise AssertionError("did not converge")


def test_analytic_two_class_convergence_bound():
    its = _analytic_iterations(10.0, 1e-2, 0.999, 2)
    assert its < 3000
    model = orthogonal_linear(num_classes=2)
    r = modinv.invert_class(wrap_model(model, "white_box"), 0)
    assert r.stop_reason == "threshold" and r.posterior >= 0.999
    assert abs(r.iterations - its) <= 1


def test_linear_target_inverts_every_class():
    handle = wrap_model(orthogonal_linear(num_classes=4), "white_box")
    for c in range(4):
        r = modinv.invert_class(handle, c)
        assert r.posterior >= 0.999 and r.iterations <= 3000
        assert r.iterations == _analytic_iterations(10.0, 1e-2, 0.999, 4)
        with torch.no_grad():
            assert float(torch.softmax(handle.module()(torch.from_numpy(r.image)[None]), 1)[0, c]) >= 0.999


def test_loss_non_increasing_on_convex_target():
    torch.manual_seed(0)
    handle = wrap_model(LinearSoftmax(num_classes=3), "white_box")
    r = modinv.invert_class(handle, 1, modinv.InversionConfig(max_iter=300))
    h = np.array(r.loss_history)
    assert np.all(np.diff(h) <= 1e-6)


def test_zero_threshold_returns_start():
    r = modinv.invert_class(wrap_model(orthogonal_linear(), "white_box"), 0, modinv.InversionConfig(threshold=0))
    assert r.iterations == 0 and r.stop_reason == "threshold"
    assert np.array_equal(r.image, np.zeros((3, 32, 32), dtype=np.float32))


def test_early_stop_on_flat_target():
    from helpers import ConstantModel

    handle = wrap_model(ConstantModel([0.0, 0.0]), "white_box")
    r = modinv.invert_class(handle, 0, modinv.InversionConfig(early_stop_patience=100))
    assert r.stop_reason == "early_stop" and r.iterations == 100


def test_inversion_needs_white_box():
    with pytest.raises(CapabilityError):
        modinv.invert_class(wrap_model(orthogonal_linear(), "black_box"), 0)


def test_invalid_inversion_config():
    with pytest.raises(ValueError):
        modinv.InversionConfig(threshold=1.0)
    with pytest.raises(ValueError):
        modinv.InversionConfig(max_iter=0)


def _two_class_ds(mean=(), std=()):
    images = np.zeros((4, 1, 32, 32), dtype=np.float32)
    images[2:] = 2.0
    return LabeledImageDataset(images, np.array([0, 0, 1, 1]), 2, mean=mean, std=std)


def test_inversion_mse_examples():
    ds = _two_class_ds()
    means = modinv.class_means(ds)
    assert modinv.eval_inversion_mse(means, ds) == 0.0
    ones = {0: np.ones((1, 32, 32), dtype=np.float32)}
    assert modinv.eval_inversion_mse(ones, ds) == 1.0


def test_inversion_mse_is_in_raw_pixel_units():
    ds = _two_class_ds(mean=(5.0,), std=(3.0,))
    ones = {0: np.ones((1, 32, 32), dtype=np.float32)}
    assert modinv.eval_inversion_mse(ones, ds) == pytest.approx(9.0)


def test_inversion_mse_missing_class():
    ds = _two_class_ds()
    with pytest.raises(ClassMissing):
        modinv.eval_inversion_mse({5: np.zeros((1, 32, 32))}, LabeledImageDataset(ds.images, ds.labels, 6))


# -- GAN inversion ------------------------------------------------------------


@pytest.fixture(scope="module")
def small_gan(tiny_split):
    cfg = modinv.GanInversionConfig(gan_epochs=2, width=8, gan_batch_size=32)
    return modinv.train_inversion_gan(tiny_split.shadow_train, cfg, seed=0), cfg


def test_generator_shape_and_range():
    G = modinv.Generator(100, 3, width=8)
    with torch.no_grad():
        out = G(torch.rand(5, 100) * 2 - 1)
    assert out.shape == (5, 3, 32, 32)
    assert float(out.abs().max()) <= 1.0


def test_gan_unpacks_and_logs_losses(small_gan):
    gan, cfg = small_gan
    G, D = gan
    assert isinstance(G, modinv.Generator) and isinstance(D, modinv.Discriminator)
    assert len(gan.losses) == cfg.gan_epochs
    x = torch.randn(2, 3, 32, 32)
    assert torch.allclose(gan.to_data_space(gan.to_gan_space(x)), x, atol=1e-5)


def test_gan_needs_a_full_batch(tiny_split):
    with pytest.raises(DatasetTooSmall):
        modinv.train_inversion_gan(tiny_split.shadow_train.subset(range(10)))


def test_discriminator_separates_untrained_generator(tiny_split):
    # oracle: freeze the generator at init and train the discriminator alone
    torch.manual_seed(0)
    G, D = modinv.Generator(100, 3, 8), modinv.Discriminator(3, 8)
    G.apply(modinv._init_weights)
    D.apply(modinv._init_weights)
    G.eval()
    real = torch.from_numpy(tiny_split.shadow_train.images).clamp(-1, 1)
    opt = torch.optim.Adam(D.parameters(), lr=2e-4, betas=(0.5, 0.999))
    gen = torch.Generator().manual_seed(0)
    for _ in range(30):
        modinv.discriminator_step(D, G, real, opt, 100, gen)
    with torch.no_grad():
        fake = G(torch.rand(len(real), 100, generator=gen) * 2 - 1)
    assert modinv.discriminator_accuracy(D, real, fake) > 0.9


def test_latent_search_clips_and_fans_out(small_gan, small_model):
    gan, cfg = small_gan
    cfg = modinv.GanInversionConfig(iters=20, lr=0.5, clip_range=0.3, width=8)
    r = modinv.gan_invert_class(wrap_model(small_model, "white_box"), gan, 2, cfg, n_samples=5, seed=0)
    assert r.images.shape == (5, 3, 32, 32)
    assert np.abs(r.latents).max() <= 0.3 + 1e-7
    assert len({z.tobytes() for z in r.latents}) == 5


def test_zero_lambda_ignores_target(small_gan, small_model):
    gan, _ = small_gan
    cfg = modinv.GanInversionConfig(iters=15, lambda_ratio=0.0, width=8)
    torch.manual_seed(3)
    other = LinearSoftmax(num_classes=4)
    a = modinv.gan_invert_class(wrap_model(small_model, "white_box"), gan, 0, cfg, 2, seed=1)
    b = modinv.gan_invert_class(wrap_model(other, "white_box"), gan, 3, cfg, 2, seed=1)
    assert np.array_equal(a.latents, b.latents)


def test_gan_inversion_needs_white_box(small_gan, small_model):
    with pytest.raises(CapabilityError):
        modinv.gan_invert_class(wrap_model(small_model, "black_box"), small_gan[0], 0)


def test_gan_config_validation():
    with pytest.raises(ValueError):
        modinv.GanInversionConfig(lambda_ratio=-1)
    with pytest.raises(ValueError):
        modinv.GanInversionConfig(iters=0)


def test_eval_accuracy_on_real_images(small_model, tiny_split):
    ds = tiny_split.target_train
    acc, f1 = modinv.eval_inversion_accuracy(ds.images, ds.labels, small_model)
    with torch.no_grad():
        pred = small_model(torch.from_numpy(ds.images)).argmax(1).numpy()
    assert acc == metrics.accuracy(pred, ds.labels)
    assert f1 == metrics.macro_f1(pred, ds.labels, 4)


def test_eval_accuracy_on_noise_is_chance(small_model):
    rng = np.random.default_rng(0)
    noise = rng.uniform(-1, 1, size=(400, 3, 32, 32)).astype(np.float32)
    acc, _ = modinv.eval_inversion_accuracy(noise, np.arange(400) % 4, small_model)
    assert abs(acc - 0.25) <= 0.1


def test_image_grid_written(tmp_path):
    from PIL import Image

    images = np.random.default_rng(0).normal(size=(5, 3, 32, 32))
    modinv.save_image_grid(images, tmp_path / "g.png", nrow=4)
    assert Image.open(tmp_path / "g.png").size == (4 * 34 + 2, 2 * 34 + 2)
