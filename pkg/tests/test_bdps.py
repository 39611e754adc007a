"""Blind solver: projection, likelihood gradients, joint sampling behavior.

Analytic eps-predictors again stand in for trained nets wherever a closed
form exists, so the solver mechanics are checked without any training.
The end-to-end recovery check at the bottom is the exception: it trains a
small real kernel net, because the behavior it probes belongs to the
learned prior rather than to the solver loop.
"""

import numpy as np
import pytest

import oracles
from opforge import rngs
from opforge.autodiff import Graph, Tensor, backward, sum_
from opforge.bdps import (
    BdpsConfig,
    _project_tensor,
    bdps_sample,
    likelihood_grad,
    project_kernel,
)
from opforge.diffusion import (
    DiffusionTrainConfig,
    ScoreNet,
    linear_schedule,
    load_score_net,
    train_score,
    tweedie_denoise,
)
from opforge.errors import ConfigError, DivergenceError
from opforge.forward_model import LsiOperator, apply
from opforge.metrics import psnr
from opforge.psf import Psf, GaussianBlurParams, gaussian_psf


class ZeroNet:
    def __init__(self, schedule, hw):
        self.schedule = schedule
        self.trained_hw = hw
        self.params = {}

    def forward(self, x, t):
        return Tensor(np.zeros(x.shape))


class PointMassNet:
    def __init__(self, schedule, mu):
        self.schedule = schedule
        self.mu = np.asarray(mu, dtype=np.float64)
        self.trained_hw = self.mu.shape
        self.params = {}

    def forward(self, x, t):
        ab = self.schedule.alpha_bar_t(t)
        ab = np.broadcast_to(ab, (x.shape[0],)).reshape((-1, 1, 1))
        target = np.broadcast_to(self.mu, x.shape)
        return (x - Tensor(np.sqrt(ab) * target)) * (1.0 / np.sqrt(1.0 - ab))


class UnitNormalEps:
    """Exact noise predictor when the clean signal is itself standard normal."""

    def __init__(self, schedule, hw):
        self.schedule = schedule
        self.trained_hw = hw
        self.params = {}

    def forward(self, x, t):
        ab = np.broadcast_to(self.schedule.alpha_bar_t(t), (x.shape[0],))
        return x * Tensor(np.sqrt(1.0 - ab).reshape((-1, 1, 1)))


def tiny_net(seed, label, schedule, hw):
    net = ScoreNet(rngs.stream(seed, label), base_channels=2, emb_dim=4)
    net.schedule = schedule
    net.trained_hw = hw
    return net


def smooth_texture(rng, hw):
    base = rng.standard_normal(hw)
    f = np.fft.rfft2(base)
    fy = np.fft.fftfreq(hw[0])[:, None]
    fx = np.fft.rfftfreq(hw[1])[None, :]
    f *= 1.0 / (1.0 + 40.0 * (fy ** 2 + fx ** 2))
    img = np.fft.irfft2(f, s=hw)
    return (img - img.mean()) / img.std()


def test_project_valid_kernel_unchanged():
    k = gaussian_psf(GaussianBlurParams(1.2, 1.2, 0.0), 9)
    out = project_kernel(k.weights)
    assert np.array_equal(out.weights, k.weights)


def test_project_all_negative_gives_uniform():
    out = project_kernel(-np.abs(rngs.stream(1, "neg").standard_normal((7, 7))))
    assert np.allclose(out.weights, 1.0 / 49, atol=1e-15)


def test_project_mixed_sign_matches_brute_force():
    raw = rngs.stream(2, "mixed").standard_normal((9, 9))
    out = project_kernel(raw)
    clamped = np.where(raw > 0, raw, 0.0)
    want = clamped / clamped.sum()
    assert np.allclose(out.weights, want, atol=1e-15)
    assert isinstance(out, Psf)


def test_project_mass_threshold_branches():
    nearly = np.full((5, 5), 3e-10)   # mass 7.5e-9, below threshold
    assert np.allclose(project_kernel(nearly).weights, 0.04)
    enough = np.zeros((5, 5))
    enough[2, 2] = 2e-8               # above threshold, normalizes
    out = project_kernel(enough).weights
    assert out[2, 2] == pytest.approx(1.0)


def test_project_tensor_agrees_with_scalar_path():
    rng = rngs.stream(3, "batch")
    batch = rng.standard_normal((6, 7, 7))
    batch[2] = -np.abs(batch[2])      # force a dead row through the fallback
    with Graph():
        got = _project_tensor(Tensor(batch)).data
    for i in range(6):
        assert np.allclose(got[i], project_kernel(batch[i]).weights, atol=1e-12)


def test_project_tensor_gradients_match_finite_differences():
    sched = linear_schedule(25)
    raw = rngs.stream(4, "proj").standard_normal((2, 5, 5))
    target = rngs.stream(5, "target").standard_normal((2, 5, 5))

    def loss_value():
        outs = []
        for item in raw:
            outs.append(project_kernel(item).weights)
        return float(((np.stack(outs) - target) ** 2).sum())

    t = Tensor(raw.copy(), requires_grad=True)
    with Graph() as tape:
        diff = _project_tensor(t) - Tensor(target)
        loss = sum_(diff * diff)
    backward(loss, tape)
    flat = raw.reshape(-1)
    gflat = t.grad.reshape(-1)
    idx = rngs.stream(6, "coords").choice(flat.size, 20, replace=False)
    h = 1e-6
    for i in idx:
        keep = flat[i]
        flat[i] = keep + h
        up = loss_value()
        flat[i] = keep - h
        down = loss_value()
        flat[i] = keep
        fd = (up - down) / (2 * h)
        assert abs(fd - gflat[i]) <= 1e-3 * max(abs(fd), 1e-8)


def test_likelihood_grad_zero_residual_gives_zero_grads():
    sched = linear_schedule(25)
    t = 10
    ab = sched.alpha_bar_t(t)
    img_net = ZeroNet(sched, (8, 8))
    ker_net = ZeroNet(sched, (5, 5))
    kern = gaussian_psf(GaussianBlurParams(1.0, 1.0, 0.0), 5)
    x_t = rngs.stream(7, "xt").standard_normal((2, 8, 8))
    k_t = np.sqrt(ab) * np.broadcast_to(kern.weights, (2, 5, 5))
    x0 = x_t / np.sqrt(ab)
    op = LsiOperator(kern, (8, 8))
    y = np.stack([apply(op, img) for img in x0])
    gx, gk, rn = likelihood_grad(y, x_t, k_t, img_net, ker_net, t)
    assert np.max(np.abs(gx)) < 1e-9
    assert np.max(np.abs(gk)) < 1e-9
    assert np.max(rn) < 1e-9


def test_likelihood_grad_matches_finite_differences():
    sched = linear_schedule(25)
    img_net = tiny_net(8, "img", sched, (8, 8))
    ker_net = tiny_net(9, "ker", sched, (5, 5))
    t = 12
    rng = rngs.stream(10, "state")
    y = rng.standard_normal((2, 8, 8))
    x_t = rng.standard_normal((2, 8, 8))
    k_t = rng.standard_normal((2, 5, 5))
    gx, gk, _ = likelihood_grad(y, x_t, k_t, img_net, ker_net, t)

    def loss_value():
        x0 = tweedie_denoise(img_net, x_t, t, sched)
        k0r = tweedie_denoise(ker_net, k_t, t, sched)
        total = 0.0
        for i in range(2):
            k0 = project_kernel(k0r[i]).weights
            conv = oracles.conv_circular_loops(x0[i], k0)
            total += float(((y[i] - conv) ** 2).sum())
        return total

    coords = rngs.stream(11, "coords")
    h = 1e-5
    for arr, grad in ((x_t, gx), (k_t, gk)):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in coords.choice(flat.size, 10, replace=False):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            fd = (up - down) / (2 * h)
            assert abs(fd - gflat[i]) <= 1e-3 * max(abs(fd), 1e-6)


def test_likelihood_grad_residual_norm_homogeneity():
    sched = linear_schedule(25)
    img_net = ZeroNet(sched, (8, 8))
    ker_net = ZeroNet(sched, (5, 5))
    rng = rngs.stream(12, "state")
    y = rng.standard_normal((2, 8, 8))
    x_t = rng.standard_normal((2, 8, 8))
    k_t = rng.standard_normal((2, 5, 5))
    _, _, base = likelihood_grad(y, x_t, k_t, img_net, ker_net, 5)
    c = -2.5
    _, _, scaled = likelihood_grad(c * y, c * x_t, k_t, img_net, ker_net, 5)
    assert np.allclose(scaled, abs(c) * base, rtol=1e-12)


def test_likelihood_grad_rejects_nan_state():
    sched = linear_schedule(25)
    img_net = ZeroNet(sched, (6, 6))
    ker_net = ZeroNet(sched, (3, 3))
    y = np.zeros((1, 6, 6))
    x_t = np.full((1, 6, 6), np.nan)
    k_t = np.ones((1, 3, 3))
    with pytest.raises(DivergenceError):
        likelihood_grad(y, x_t, k_t, img_net, ker_net, 3)


def test_config_validation():
    with pytest.raises(ConfigError):
        BdpsConfig(steps=0, seed=1)
    with pytest.raises(ConfigError):
        BdpsConfig(steps=10, seed=1, zeta_image=-0.1)
    with pytest.raises(ConfigError):
        BdpsConfig(steps=10, seed=1, zeta_kernel=float("inf"))
    with pytest.raises(ConfigError):
        BdpsConfig(steps=10, seed=1, noise_sigma=-1.0)
    BdpsConfig(steps=10, seed=1, zeta_image=0.0, zeta_kernel=0.0)


def test_bdps_zero_guidance_ignores_measurement():
    sched = linear_schedule(50)
    img_net = PointMassNet(sched, np.full((6, 6), 0.3))
    ker_net = PointMassNet(sched, np.full((3, 3), 1.0 / 9))
    cfg = BdpsConfig(steps=50, seed=21, zeta_image=0.0, zeta_kernel=0.0)
    rng = rngs.stream(22, "y")
    y1 = rng.standard_normal((6, 6))
    y2 = rng.standard_normal((6, 6)) * 10
    xa, ka, _ = bdps_sample(y1, img_net, ker_net, cfg)
    xb, kb, _ = bdps_sample(y2, img_net, ker_net, cfg)
    assert np.array_equal(xa, xb)
    assert np.array_equal(ka, kb)
    # guidance actually moves the state once the denoiser depends on it
    zi_net = ZeroNet(sched, (6, 6))
    zk_net = ZeroNet(sched, (3, 3))
    cfg_on = BdpsConfig(steps=50, seed=21, zeta_image=1.0, zeta_kernel=0.3)
    cfg_off = BdpsConfig(steps=50, seed=21, zeta_image=0.0, zeta_kernel=0.0)
    xc, _, _ = bdps_sample(y1, zi_net, zk_net, cfg_on)
    xd, _, _ = bdps_sample(y1, zi_net, zk_net, cfg_off)
    assert not np.array_equal(xc, xd)


def test_bdps_deterministic_and_shapes():
    sched = linear_schedule(25)
    img_net = PointMassNet(sched, np.zeros((6, 6)))
    ker_net = PointMassNet(sched, np.full((3, 3), 1.0 / 9))
    cfg = BdpsConfig(steps=25, seed=5)
    y = rngs.stream(23, "y").standard_normal((6, 6))
    x1, k1, tr1 = bdps_sample(y, img_net, ker_net, cfg)
    x2, k2, tr2 = bdps_sample(y, img_net, ker_net, cfg)
    assert x1.tobytes() == x2.tobytes()
    assert k1.tobytes() == k2.tobytes()
    assert x1.shape == (6, 6) and k1.shape == (3, 3)
    assert len(tr1.steps) == 25 and tr1.steps[0] == 25 and tr1.steps[-1] == 1
    yb = np.stack([y, y * 0.5, y * 2.0])
    xb, kb, _ = bdps_sample(yb, img_net, ker_net, cfg)
    assert xb.shape == (3, 6, 6) and kb.shape == (3, 3, 3)


def test_bdps_kernel_output_is_valid_psf():
    sched = linear_schedule(25)
    img_net = ZeroNet(sched, (6, 6))
    ker_net = ZeroNet(sched, (5, 5))
    cfg = BdpsConfig(steps=25, seed=6)
    y = rngs.stream(24, "y").standard_normal((2, 6, 6))
    _, kb, _ = bdps_sample(y, img_net, ker_net, cfg)
    assert np.all(kb >= 0)
    assert np.allclose(kb.sum(axis=(1, 2)), 1.0, atol=1e-9)


def test_bdps_refuses_mismatched_schedules():
    s1, s2 = linear_schedule(25), linear_schedule(50)
    img_net = ZeroNet(s1, (6, 6))
    ker_net = ZeroNet(s2, (3, 3))
    cfg = BdpsConfig(steps=25, seed=1)
    with pytest.raises(ConfigError):
        bdps_sample(np.zeros((6, 6)), img_net, ker_net, cfg)


def test_bdps_refuses_wrong_step_count():
    s = linear_schedule(25)
    img_net = ZeroNet(s, (6, 6))
    ker_net = ZeroNet(s, (3, 3))
    cfg = BdpsConfig(steps=30, seed=1)
    with pytest.raises(ConfigError):
        bdps_sample(np.zeros((6, 6)), img_net, ker_net, cfg)


def test_bdps_divergence_attaches_trace():
    sched = linear_schedule(50)

    class BlowsUp:
        schedule = sched
        trained_hw = (3, 3)
        params = {}

        def forward(self, x, t):
            tt = int(np.asarray(t).ravel()[0])
            if tt < 30:
                return Tensor(np.full(x.shape, np.inf))
            return Tensor(np.zeros(x.shape))

    img_net = ZeroNet(sched, (6, 6))
    cfg = BdpsConfig(steps=50, seed=2)
    with pytest.raises(DivergenceError) as err:
        bdps_sample(np.zeros((6, 6)), img_net, BlowsUp(), cfg)
    assert err.value.trace is not None
    assert len(err.value.trace.steps) > 0


def test_bdps_frozen_kernel_residual_settles():
    # non-blind sanity mode: with the true kernel clamped and a point-mass
    # image prior, the residual trace must be non-increasing over the final
    # quarter of steps in at least 90% of seeds
    sched = linear_schedule(100)
    truth = rngs.stream(25, "truth").random((8, 8))
    img_net = PointMassNet(sched, truth)
    ker_net = PointMassNet(sched, np.full((3, 3), 1.0 / 9))
    kern = gaussian_psf(GaussianBlurParams(0.9, 0.9, 0.0), 3)
    y = apply(LsiOperator(kern, (8, 8)), truth)
    ok = 0
    for seed in range(10):
        cfg = BdpsConfig(steps=100, seed=seed)
        _, _, trace = bdps_sample(y, img_net, ker_net, cfg,
                                  frozen_kernel=kern.weights)
        tail = trace.residual[-25:]
        if all(b <= a + 1e-9 for a, b in zip(tail, tail[1:])):
            ok += 1
    assert ok >= 9


def test_bdps_trace_rows_format():
    sched = linear_schedule(25)
    img_net = ZeroNet(sched, (6, 6))
    ker_net = ZeroNet(sched, (3, 3))
    cfg = BdpsConfig(steps=25, seed=3)
    _, _, trace = bdps_sample(np.zeros((6, 6)), img_net, ker_net, cfg)
    rows = list(trace.rows())
    assert rows[0] == ["step", "residual", "image_grad_norm", "kernel_grad_norm"]
    assert len(rows) == 26
    assert rows[1][0] == 25


def test_bdps_shifted_impulse_gains_3db(tmp_path):
    # End-to-end blind recovery with the most identifiable operator there
    # is: a single off-center impulse.  The likelihood alone cannot decide
    # whether a shift lives in the image or in the kernel; a kernel prior
    # trained on that one impulse has to pin it, and the solver then gets
    # to undo the displacement.  Trains a real (small) net: strongest form
    # of the check, since an undertrained prior demonstrably fails it.
    k, hw, T = 9, (16, 16), 150
    off = (2, -1)
    truth = np.zeros((k, k))
    truth[k // 2 + off[0], k // 2 + off[1]] = 1.0

    stack = np.broadcast_to(truth, (64, k, k)).copy()
    cfg = DiffusionTrainConfig(steps=2500, seed=9, domain="kernel",
                               kernel_source="truth", T=T, batch_size=32,
                               base_channels=8, lr=1e-3)
    ckpt, _ = train_score(cfg, stack, str(tmp_path))
    ker_net, sched = load_score_net(ckpt)
    img_net = UnitNormalEps(sched, hw)

    rng = rngs.stream(63, "shift-probe")
    xs = [smooth_texture(rng, hw) for _ in range(4)]
    op = LsiOperator(Psf(truth), hw)
    ys = np.stack([apply(op, x) for x in xs])

    xh, kh, _ = bdps_sample(ys, img_net, ker_net, BdpsConfig(steps=T, seed=5))
    for i in range(4):
        gain = psnr(xs[i], xh[i]) - psnr(xs[i], ys[i])
        assert gain >= 3.0
        peak = np.unravel_index(np.argmax(kh[i]), kh[i].shape)
        assert peak == (k // 2 + off[0], k // 2 + off[1])
