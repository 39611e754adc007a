"""Blind deconvolution by paired posterior sampling.

Two reverse diffusion chains run in lockstep, one over images and one over
blur kernels, sharing a noise schedule. Each step takes an ancestral prior
step on both chains, then subtracts a data-consistency gradient computed
through Tweedie denoising of both states and the circular forward model.
The kernel chain itself stays unconstrained; simplex projection happens only
inside the likelihood and on the final output.

Score networks used here follow a small protocol: ``forward(x, t)`` plus the
``schedule`` and ``trained_hw`` attributes stamped by the diffusion trainer.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward, conv2d_circular, relu, sum_
from .diffusion import _reverse_step, tweedie_denoise
from .errors import ConfigError, DivergenceError, ParameterError
from .psf import Psf
from . import rngs

__all__ = ["BdpsConfig", "BdpsTrace", "project_kernel", "likelihood_grad",
           "bdps_sample"]


@dataclass(frozen=True)
class BdpsConfig:
    steps: int
    seed: int
    noise_sigma: float = 0.0
    zeta_image: float = 1.0
    zeta_kernel: float = 0.3

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        # zero scales are allowed so guidance can be switched off outright
        if not (np.isfinite(self.zeta_image) and np.isfinite(self.zeta_kernel)):
            raise ConfigError("guidance scales must be finite")
        if self.zeta_image < 0 or self.zeta_kernel < 0:
            raise ConfigError("guidance scales must be nonnegative")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ConfigError(f"bad noise_sigma {self.noise_sigma}")


@dataclass
class BdpsTrace:
    """Per-step diagnostics, step index descending from T to 1."""

    steps: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    image_grad_norm: list = field(default_factory=list)
    kernel_grad_norm: list = field(default_factory=list)

    def rows(self):
        yield ["step", "residual", "image_grad_norm", "kernel_grad_norm"]
        for i, s in enumerate(self.steps):
            yield [s, f"{self.residual[i]:.6f}",
                   f"{self.image_grad_norm[i]:.6f}",
                   f"{self.kernel_grad_norm[i]:.6f}"]


def project_kernel(raw: np.ndarray) -> Psf:
    """Nearest well-formed blur kernel: clamp negatives, renormalize; if
    essentially no mass survives, fall back to the uniform kernel."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.all(raw >= 0) and abs(raw.sum() - 1.0) <= 1e-9:
        return Psf(raw.copy())
    w = np.maximum(raw, 0.0)
    mass = w.sum()
    if mass < 1e-8:
        k = w.shape[0]
        return Psf(np.full(w.shape, 1.0 / (k * k)))
    return Psf(w / mass)


def _project_tensor(k: Tensor) -> Tensor:
    """Differentiable twin of project_kernel for (B, k, k) batches. The
    uniform fallback is a constant, so its branch carries no gradient."""
    w = relu(k)
    mass = sum_(w, axis=(1, 2), keepdims=True)
    dead = mass.data[:, 0, 0] < 1e-8
    if np.any(dead):
        kk = k.shape[1] * k.shape[2]
        patch = np.where(dead[:, None, None], 1.0 / kk, 0.0)
        keep = np.where(dead[:, None, None], 0.0, 1.0)
        # dead rows divide by the constant 1 so live rows keep the full
        # quotient-rule gradient through their own mass
        safe = mass * Tensor(keep) + Tensor(1.0 - keep)
        return w * Tensor(keep) / safe + Tensor(patch)
    return w / mass


def _schedule_of(net):
    sched = getattr(net, "schedule", None)
    if sched is None:
        raise ConfigError("score net has no schedule; train or load it first")
    return sched


def likelihood_grad(y: np.ndarray, x_t: np.ndarray, k_t: np.ndarray,
                    image_net, kernel_net, t: int):
    """Gradient of the squared measurement residual through both chains.

    Batched: (B, H, W) measurements and states with (B, k, k) kernel states.
    Items are independent, so one backward pass over the summed loss yields
    per-item gradients. Returns (grad_x, grad_k, residual_norms)."""
    schedule = _schedule_of(image_net)
    with Graph() as tape:
        xt = Tensor(np.asarray(x_t, dtype=np.float64), requires_grad=True)
        kt = Tensor(np.asarray(k_t, dtype=np.float64), requires_grad=True)
        x0 = tweedie_denoise(image_net, xt, t, schedule)
        k0 = _project_tensor(
            tweedie_denoise(kernel_net, kt, t, _schedule_of(kernel_net)))
        r = Tensor(np.asarray(y, dtype=np.float64)) - conv2d_circular(x0, k0)
        loss = sum_(r * r)
    backward(loss, tape)
    if xt.grad is None or kt.grad is None or not (
        np.all(np.isfinite(xt.grad)) and np.all(np.isfinite(kt.grad))
    ):
        raise DivergenceError(f"likelihood gradient diverged at step {t}", step=t)
    norms = np.sqrt((r.data ** 2).sum(axis=(1, 2)))
    return xt.grad, kt.grad, norms


def _frozen_kernel_grad(y, x_t, kernel, image_net, t):
    """Image-chain guidance with the kernel clamped to a known truth."""
    schedule = _schedule_of(image_net)
    kb = np.broadcast_to(kernel, (x_t.shape[0],) + kernel.shape)
    with Graph() as tape:
        xt = Tensor(np.asarray(x_t, dtype=np.float64), requires_grad=True)
        x0 = tweedie_denoise(image_net, xt, t, schedule)
        r = Tensor(np.asarray(y, dtype=np.float64)) - conv2d_circular(x0, Tensor(kb))
        loss = sum_(r * r)
    backward(loss, tape)
    if xt.grad is None or not np.all(np.isfinite(xt.grad)):
        raise DivergenceError(f"likelihood gradient diverged at step {t}", step=t)
    return xt.grad, np.sqrt((r.data ** 2).sum(axis=(1, 2)))


def _freeze(net):
    for p in net.params.values():
        p.requires_grad = False
    return net.params


def _unfreeze(params):
    for p in params.values():
        p.requires_grad = True


def bdps_sample(y: np.ndarray, image_net, kernel_net, config: BdpsConfig,
                frozen_kernel: np.ndarray | None = None):
    """Jointly sample (image, kernel) posteriors for one or more measurements.

    y may be (H, W) or (B, H, W); outputs match, with kernels (k, k) or
    (B, k, k). With frozen_kernel set the kernel chain is clamped to that
    kernel (non-blind sanity mode) and only the image chain is guided.
    Returns (images, kernels, trace).
    """
    schedule = _schedule_of(image_net)
    if not schedule.matches(_schedule_of(kernel_net)):
        raise ConfigError("image and kernel priors were trained on different "
                          "noise schedules")
    if schedule.T != config.steps:
        raise ConfigError(f"config.steps={config.steps} but priors were "
                          f"trained with T={schedule.T}")
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
    if y.ndim != 3:
        raise ParameterError(f"y must be (H, W) or (B, H, W), got {y.shape}")
    b = y.shape[0]
    khw = kernel_net.trained_hw
    if khw is None or khw[0] != khw[1]:
        raise ConfigError("kernel prior must carry a square trained grid")
    k = khw[0]
    if frozen_kernel is not None:
        frozen_kernel = np.asarray(frozen_kernel, dtype=np.float64)
        if frozen_kernel.shape != (k, k):
            raise ParameterError("frozen kernel shape mismatch")

    rng = rngs.stream(config.seed, "bdps")
    x = rng.standard_normal(y.shape)
    kst = rng.standard_normal((b, k, k))
    saved = _freeze(image_net), _freeze(kernel_net)
    trace = BdpsTrace()
    x1, k1 = x, kst
    try:
        for t in range(schedule.T, 0, -1):
            try:
                if frozen_kernel is None:
                    gx, gk, rn = likelihood_grad(y, x, kst, image_net,
                                                 kernel_net, t)
                else:
                    gx, rn = _frozen_kernel_grad(y, x, frozen_kernel,
                                                 image_net, t)
                    gk = np.zeros_like(kst)
            except DivergenceError as err:
                err.trace = trace
                raise
            if t == 1:
                x1, k1 = x.copy(), kst.copy()
            zx = rng.standard_normal(x.shape) if t > 1 else None
            zk = rng.standard_normal(kst.shape) if t > 1 else None
            scale = (config.zeta_image / (rn + 1e-8)).reshape(b, 1, 1)
            x = _reverse_step(image_net, schedule, x, t, zx) - scale * gx
            if frozen_kernel is None:
                kscale = (config.zeta_kernel / (rn + 1e-8)).reshape(b, 1, 1)
                kst = _reverse_step(kernel_net, schedule, kst, t, zk) - kscale * gk
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(kst))):
                raise DivergenceError(f"solver state diverged at step {t}",
                                      step=t, trace=trace)
            trace.steps.append(t)
            trace.residual.append(float(rn.mean()))
            trace.image_grad_norm.append(
                float(np.sqrt((gx ** 2).sum(axis=(1, 2))).mean()))
            trace.kernel_grad_norm.append(
                float(np.sqrt((gk ** 2).sum(axis=(1, 2))).mean()))
        x_hat = tweedie_denoise(image_net, x1, 1, schedule)
        if frozen_kernel is None:
            k_raw = tweedie_denoise(kernel_net, k1, 1, schedule)
            kernels = np.stack([project_kernel(kr).weights for kr in k_raw])
        else:
            kernels = np.broadcast_to(frozen_kernel, (b, k, k)).copy()
    finally:
        _unfreeze(saved[0])
        _unfreeze(saved[1])
    if single:
        return x_hat[0], kernels[0], trace
    return x_hat, kernels, trace
