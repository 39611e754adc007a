"""Operator-GAN: heads, losses, a training step, and run artifacts.

Loss values are checked against closed forms computed here with plain
numpy before the module is trusted, and loss gradients against central
differences.
"""

import math

import numpy as np
import pytest

import oracles
from opforge import rngs
from opforge.autodiff import Graph, Tensor, backward
from opforge.data import TrainingView, build_dataset, training_view
from opforge.errors import ConfigError, ParameterError, ShapeError
from opforge.fileio import load_checkpoint
from opforge.gan import (
    DiscriminatorNet,
    GanTrainConfig,
    GeneratorNet,
    _fake_measurements,
    gan_losses,
    generate_psf,
    load_generator,
    sample_psfs,
    train,
    train_from_view,
    train_step,
)
from opforge.optim import init_adam
from opforge.psf import GaussianPrior, gaussian_psf, sample_gaussian_params

BLUR = GaussianPrior(0.6, 1.2, isotropic=True)


def _sampler(rng):
    return gaussian_psf(sample_gaussian_params(rng, BLUR), 5)


def _dataset(tmp_path, n=12, sigma=0.05, seed=77):
    root = tmp_path / "data"
    man = build_dataset(root, n, (16, 16), "gaussian", _sampler, sigma, seed)
    return man, root


def _numpy_losses(real_logits, fake_logits):
    softplus = lambda v: np.logaddexp(0.0, v)
    d = softplus(-real_logits).mean() + softplus(fake_logits).mean()
    g = softplus(-fake_logits).mean()
    return d, g


# ---------------------------------------------------------------- heads


def test_softmax_head_emits_valid_kernels():
    g = GeneratorNet(rngs.stream(3, "g"), kernel_size=9)
    ks = sample_psfs(g, rngs.stream(4, "z"), 16)
    assert ks.shape == (16, 9, 9)
    assert np.all(ks >= 0)
    np.testing.assert_allclose(ks.sum(axis=(1, 2)), 1.0, atol=1e-9)


def test_unconstrained_head_breaks_normalization():
    g = GeneratorNet(rngs.stream(3, "g"), kernel_size=9, head_mode="unconstrained")
    ks = sample_psfs(g, rngs.stream(4, "z"), 16)
    assert np.max(np.abs(ks.sum(axis=(1, 2)) - 1.0)) > 1e-3


def test_zeroed_output_block_gives_uniform_kernel():
    g = GeneratorNet(rngs.stream(5, "g"), kernel_size=9)
    g.up3.w.data[:] = 0.0
    g.up3.b.data[:] = 0.0
    g.pixel_bias.data[:] = 0.0
    k = generate_psf(g, np.zeros(64))
    np.testing.assert_allclose(k, np.full((9, 9), 1.0 / 81.0), atol=1e-12)


def test_fresh_generator_starts_inside_kernel_family():
    # the output-block bias is built as a centered bump, so step-zero samples
    # are already smooth near-isotropic kernels rather than noise
    g = GeneratorNet(rngs.stream(6, "g"), kernel_size=17)
    ks = sample_psfs(g, rngs.stream(7, "z"), 8)
    truth = oracles.gaussian_grid(17, 1.4)
    from opforge.metrics import mnc
    assert min(mnc(truth, k) for k in ks) > 0.95


def test_generate_psf_is_deterministic():
    g = GeneratorNet(rngs.stream(8, "g"), kernel_size=5)
    z = rngs.stream(9, "z").standard_normal(64)
    np.testing.assert_array_equal(generate_psf(g, z), generate_psf(g, z))
    with pytest.raises(ShapeError):
        generate_psf(g, np.zeros(63))


def test_generator_rejects_bad_kernel_size():
    with pytest.raises(ParameterError):
        GeneratorNet(rngs.stream(1, "g"), kernel_size=8)
    with pytest.raises(ParameterError):
        GeneratorNet(rngs.stream(1, "g"), kernel_size=33)


def test_discriminator_shape_contracts():
    with pytest.raises(ShapeError):
        DiscriminatorNet(rngs.stream(1, "d"), (20, 16))
    d = DiscriminatorNet(rngs.stream(1, "d"), (16, 16))
    out = d.forward(Tensor(np.zeros((3, 16, 16))))
    assert out.shape == (3, 1)
    with pytest.raises(ShapeError):
        d.forward(Tensor(np.zeros((3, 16, 8))))


# ---------------------------------------------------------------- losses


def test_gan_losses_match_numpy_closed_form():
    rng = rngs.stream(11, "logits")
    r = rng.standard_normal((6, 1))
    f = rng.standard_normal((6, 1))
    d_t, g_t = gan_losses(Tensor(r), Tensor(f))
    d_want, g_want = _numpy_losses(r, f)
    assert abs(d_t.item() - d_want) < 1e-12
    assert abs(g_t.item() - g_want) < 1e-12


def test_gan_losses_at_zero_logits():
    # an uninformative discriminator scores everything at logit 0:
    # d = 2 ln 2, g = ln 2
    z = Tensor(np.zeros((5, 1)))
    d_t, g_t = gan_losses(z, Tensor(np.zeros((5, 1))))
    assert abs(d_t.item() - 2.0 * math.log(2.0)) < 1e-12
    assert abs(g_t.item() - math.log(2.0)) < 1e-12


def test_gan_losses_in_confident_limits():
    # a perfect discriminator drives its own loss to zero while the
    # non-saturating generator loss grows linearly in the logit
    d_t, g_t = gan_losses(Tensor(np.full((4, 1), 40.0)), Tensor(np.full((4, 1), -40.0)))
    assert d_t.item() < 1e-15
    assert abs(g_t.item() - 40.0) < 1e-12


def test_gan_loss_gradients_match_central_differences():
    rng = rngs.stream(12, "logits")
    r0 = rng.standard_normal((4, 1))
    f0 = rng.standard_normal((4, 1))

    r = Tensor(r0.copy(), requires_grad=True, name="r")
    f = Tensor(f0.copy(), requires_grad=True, name="f")
    with Graph() as tape:
        d_t, _ = gan_losses(r, f)
    backward(d_t, tape)

    def d_of(rv, fv):
        return _numpy_losses(rv, fv)[0]

    h = 1e-6
    for tensor, base, other, idx in ((r, r0, f0, 2), (f, f0, r0, 1)):
        fd = np.zeros_like(base)
        for i in range(base.shape[0]):
            up, dn = base.copy(), base.copy()
            up[i, 0] += h
            dn[i, 0] -= h
            if tensor is r:
                fd[i, 0] = (d_of(up, other) - d_of(dn, other)) / (2 * h)
            else:
                fd[i, 0] = (d_of(other, up) - d_of(other, dn)) / (2 * h)
        assert oracles.rel_err(tensor.grad, fd) < 1e-6


# ------------------------------------------------------------- train_step


def _nets(hw=(16, 16), k=5, seed=21):
    ini = rngs.stream(seed, "init")
    return GeneratorNet(ini, kernel_size=k), DiscriminatorNet(ini, hw)


def test_fake_measurements_are_exact_convolutions_at_zero_noise():
    g, _ = _nets()
    rng = rngs.stream(22, "batch")
    clean = rng.standard_normal((2, 16, 16))
    ks = g.forward(Tensor(rng.standard_normal((2, 64))))
    fakes = _fake_measurements(ks, clean, 0.0, None).data
    for i in range(2):
        want = oracles.conv_circular_loops(clean[i], ks.data[i])
        np.testing.assert_allclose(fakes[i], want, atol=1e-12)


def test_train_step_with_zero_lr_changes_nothing():
    g, d = _nets()
    g_before = {n: p.data.copy() for n, p in g.params.items()}
    d_before = {n: p.data.copy() for n, p in d.params.items()}
    rng = rngs.stream(23, "batch")
    clean = rng.standard_normal((8, 16, 16))
    real = rng.standard_normal((8, 16, 16))
    d_loss, g_loss = train_step(
        g, d, clean, real, 0.05, rngs.stream(24, "step"),
        init_adam(g.params, 0.0, 0.5, 0.999),
        init_adam(d.params, 0.0, 0.5, 0.999),
    )
    assert np.isfinite(d_loss) and np.isfinite(g_loss)
    for n, p in g.params.items():
        np.testing.assert_array_equal(p.data, g_before[n])
    for n, p in d.params.items():
        np.testing.assert_array_equal(p.data, d_before[n])


def test_train_step_reaches_every_generator_parameter():
    g, d = _nets()
    rng = rngs.stream(25, "batch")
    clean = rng.standard_normal((8, 16, 16))
    real = rng.standard_normal((8, 16, 16))
    train_step(g, d, clean, real, 0.05, rngs.stream(26, "step"),
               init_adam(g.params, 2e-4, 0.5, 0.999),
               init_adam(d.params, 2e-4, 0.5, 0.999))
    for name, p in g.params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name
    # globally at least 99% of generator parameters are sensitive; the only
    # structurally dead entries are output-bias pixels outside the crop
    total = sum(p.grad.size for p in g.params.values())
    live = sum(int(np.count_nonzero(p.grad)) for p in g.params.values())
    assert live / total >= 0.99, f"only {live/total:.2%} of parameters live"


def test_train_step_leaves_discriminator_trainable():
    g, d = _nets()
    rng = rngs.stream(27, "batch")
    train_step(g, d, rng.standard_normal((4, 16, 16)),
               rng.standard_normal((4, 16, 16)), 0.0, rngs.stream(28, "step"),
               init_adam(g.params, 1e-4, 0.5, 0.999),
               init_adam(d.params, 1e-4, 0.5, 0.999))
    assert all(p.requires_grad for p in d.params.values())


# ------------------------------------------------------------- full runs


def test_config_rejections():
    with pytest.raises(ConfigError):
        GanTrainConfig(steps=0, noise_sigma=0.0, seed=1)
    with pytest.raises(ConfigError):
        GanTrainConfig(steps=10, noise_sigma=-0.1, seed=1)
    with pytest.raises(ConfigError):
        GanTrainConfig(steps=10, noise_sigma=0.0, seed=1, batch_size=0)
    with pytest.raises(ConfigError):
        GanTrainConfig(steps=10, noise_sigma=0.0, seed=1, head_mode="relu")


def test_train_rejects_sigma_mismatch(tmp_path):
    man, root = _dataset(tmp_path, sigma=0.05)
    cfg = GanTrainConfig(steps=1, noise_sigma=0.1, seed=1, kernel_size=5)
    with pytest.raises(ConfigError):
        train(cfg, man, root, tmp_path / "run")


def test_train_rejects_overlapping_views(tmp_path):
    man, root = _dataset(tmp_path)
    view = training_view(man, root)
    bad = TrainingView(
        clean_paths=view.clean_paths,
        measurement_paths=view.clean_paths[:1] + view.measurement_paths[1:],
        image_shape=view.image_shape,
        noise_sigma=view.noise_sigma,
    )
    cfg = GanTrainConfig(steps=1, noise_sigma=0.05, seed=1, kernel_size=5)
    with pytest.raises(ConfigError):
        train_from_view(cfg, bad, tmp_path / "run")


def test_single_step_run_artifacts(tmp_path):
    man, root = _dataset(tmp_path)
    cfg = GanTrainConfig(steps=1, noise_sigma=0.05, seed=31, kernel_size=5,
                         batch_size=4)
    ckpt, log = train(cfg, man, root, tmp_path / "run")
    assert ckpt.name == "gan_final.opfg"
    rows = log.read_text().strip().splitlines()
    assert rows[0] == "step,d_loss,g_loss"
    assert len(rows) == 2 and rows[1].startswith("1,")
    assert not list((tmp_path / "run").glob("gan_0*"))


def test_single_step_checkpoint_equals_live_weights(tmp_path):
    # the averaged generator is bias-corrected, so after one step it must
    # coincide with the raw parameters exactly
    man, root = _dataset(tmp_path)
    cfg = GanTrainConfig(steps=1, noise_sigma=0.05, seed=31, kernel_size=5,
                         batch_size=4)
    ckpt, _ = train(cfg, man, root, tmp_path / "run")

    view = training_view(man, root)
    from opforge.data import load_stack
    clean = load_stack(view.clean_paths)
    real = load_stack(view.measurement_paths)
    g = GeneratorNet(rngs.stream(31, "gan-init-g"), 64, 5, "softmax")
    d = DiscriminatorNet(rngs.stream(31, "gan-init-d"), (16, 16))
    gs = init_adam(g.params, cfg.lr, cfg.beta1, cfg.beta2)
    ds = init_adam(d.params, cfg.lr, cfg.beta1, cfg.beta2)
    br = rngs.stream(31, "gan-batches")
    ci = br.integers(0, clean.shape[0], size=4)
    ri = br.integers(0, real.shape[0], size=4)
    train_step(g, d, clean[ci], real[ri], 0.05, rngs.stream(31, "gan-step", 1),
               gs, ds, 1)

    arrays = load_checkpoint(ckpt)
    for n, p in g.params.items():
        np.testing.assert_allclose(arrays[f"G.{n}"], p.data, atol=1e-12)


def test_intermediate_checkpoints_load(tmp_path):
    man, root = _dataset(tmp_path)
    cfg = GanTrainConfig(steps=3, noise_sigma=0.05, seed=32, kernel_size=5,
                         batch_size=4, checkpoint_every=2)
    ckpt, _ = train(cfg, man, root, tmp_path / "run")
    mid = tmp_path / "run" / "gan_000002.opfg"
    assert mid.exists()
    g = load_generator(mid)
    ks = sample_psfs(g, rngs.stream(33, "z"), 4)
    np.testing.assert_allclose(ks.sum(axis=(1, 2)), 1.0, atol=1e-9)


def test_training_is_bitwise_deterministic(tmp_path):
    man, root = _dataset(tmp_path)
    cfg = GanTrainConfig(steps=4, noise_sigma=0.05, seed=34, kernel_size=5,
                         batch_size=4)
    c1, l1 = train(cfg, man, root, tmp_path / "a")
    c2, l2 = train(cfg, man, root, tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes()
    assert l1.read_text() == l2.read_text()


def test_load_generator_round_trip(tmp_path):
    man, root = _dataset(tmp_path)
    cfg = GanTrainConfig(steps=2, noise_sigma=0.05, seed=35, kernel_size=5,
                         batch_size=4, head_mode="unconstrained")
    ckpt, _ = train(cfg, man, root, tmp_path / "run")
    g = load_generator(ckpt)
    assert g.kernel_size == 5 and g.head_mode == "unconstrained"
    z = rngs.stream(36, "z").standard_normal(64)
    k1 = generate_psf(g, z)
    k2 = generate_psf(load_generator(ckpt), z)
    np.testing.assert_array_equal(k1, k2)


def test_load_generator_rejects_foreign_files(tmp_path):
    from opforge.fileio import save_checkpoint
    path = tmp_path / "other.opfg"
    save_checkpoint(path, {"weights": np.zeros((3, 3))})
    with pytest.raises(ConfigError):
        load_generator(path)
