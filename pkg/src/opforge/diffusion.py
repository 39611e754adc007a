"""Variance-preserving diffusion: schedule, DSM training, ancestral sampling.

The same machinery trains an image prior and the kernel priors used by the
blind solver. Networks predict the perturbation noise; the score is
-net(x_t, t)/sqrt(1 - alpha_bar_t), and the denoised estimate comes from
Tweedie's formula. Steps are indexed t = 1..T with t = T the noisiest.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rngs
from .autodiff import (
    Graph,
    Tensor,
    add,
    backward,
    crop2d,
    leaky_relu,
    mean,
    relu,
    reshape,
    upsample2x,
    zero_grads,
)
from .errors import ConfigError, DivergenceError, ParameterError
from .fileio import save_checkpoint, load_checkpoint
from .nn import Conv, Dense, load_params, merge_params, time_embedding
from .optim import adam_step, init_adam

__all__ = [
    "NoiseSchedule", "linear_schedule", "ScoreNet", "DiffusionTrainConfig",
    "perturb", "dsm_loss", "reverse_sample", "tweedie_denoise",
    "train_score", "load_score_net", "uniform_kernels",
]

REFERENCE_T = 1000
BETA_START_REF = 1e-4
BETA_END_REF = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if beta.ndim != 1 or beta.size < 1:
            raise ParameterError("schedule needs a 1-d beta array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ParameterError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ParameterError("beta must be non-decreasing")
        ab = np.cumprod(1.0 - beta)
        if np.any(np.diff(ab) >= 0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 1e-4:
            raise ParameterError(
                f"alpha_bar at t=T is {ab[-1]:.2e}; schedule too short to reach noise"
            )
        object.__setattr__(self, "_alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.beta.size

    def beta_t(self, t):
        return self.beta[np.asarray(t) - 1]

    def alpha_bar_t(self, t):
        return self._alpha_bar[np.asarray(t) - 1]

    def matches(self, other: "NoiseSchedule") -> bool:
        return self.T == other.T and np.array_equal(self.beta, other.beta)


def linear_schedule(T: int = 300) -> NoiseSchedule:
    """Linear betas; endpoints scaled by (reference/T) so total noise injected
    is T-independent and alpha_bar_T stays below 1e-4 at desk step counts."""
    scale = REFERENCE_T / T
    return NoiseSchedule(np.linspace(BETA_START_REF * scale, BETA_END_REF * scale, T))


def _check_t(t, T: int):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > T):
        raise IndexError(f"diffusion step out of range 1..{T}")


def perturb(x0: np.ndarray, t, rng: np.random.Generator,
            schedule: NoiseSchedule):
    """Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps. t may be a
    scalar or one value per batch item."""
    x0 = np.asarray(x0, dtype=np.float64)
    _check_t(t, schedule.T)
    ab = schedule.alpha_bar_t(t)
    if np.ndim(ab) == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


class ScoreNet:
    """Small conv encoder-decoder with additive skips and a time embedding
    injected as a per-channel bias at every block. Fully convolutional, so one
    architecture serves both image and kernel grids."""

    def __init__(self, rng, base_channels: int = 8, emb_dim: int = 32):
        c = base_channels
        self.base_channels = c
        self.emb_dim = emb_dim
        # stamped by train_score / load_score_net so downstream samplers can
        # check compatibility without side-channel arguments
        self.schedule: NoiseSchedule | None = None
        self.trained_hw: tuple[int, int] | None = None
        self.c_in = Conv(rng, 1, c, 3, 1, 1, "c_in")
        self.d1 = Conv(rng, c, 2 * c, 3, 2, 1, "d1")
        self.d2 = Conv(rng, 2 * c, 4 * c, 3, 2, 1, "d2")
        self.mid = Conv(rng, 4 * c, 4 * c, 3, 1, 1, "mid")
        self.u1 = Conv(rng, 4 * c, 2 * c, 3, 1, 1, "u1")
        self.u2 = Conv(rng, 2 * c, c, 3, 1, 1, "u2")
        self.c_out = Conv(rng, c, 1, 3, 1, 1, "c_out", gain=1e-2)
        self.t_stem = Dense(rng, emb_dim, 2 * emb_dim, "t_stem")
        self.t_bias = {
            name: Dense(rng, 2 * emb_dim, ch, f"t_{name}")
            for name, ch in (("c_in", c), ("d1", 2 * c), ("d2", 4 * c),
                             ("mid", 4 * c), ("u1", 2 * c), ("u2", c))
        }
        self.params = merge_params(
            self.c_in, self.d1, self.d2, self.mid, self.u1, self.u2, self.c_out,
            self.t_stem, *self.t_bias.values(),
        )

    def _biased(self, name: str, h: Tensor, emb: Tensor) -> Tensor:
        b = h.shape[0]
        ch = h.shape[1]
        bias = reshape(self.t_bias[name](emb), (b, ch, 1, 1))
        return leaky_relu(add(h, bias))

    def forward(self, x: Tensor, t) -> Tensor:
        """(B, H, W) states and per-item integer steps -> (B, H, W)."""
        b, h, w = x.shape
        tt = np.broadcast_to(np.asarray(t), (b,))
        emb = relu(self.t_stem(Tensor(time_embedding(tt, self.emb_dim))))
        x4 = reshape(x, (b, 1, h, w))
        h0 = self._biased("c_in", self.c_in(x4), emb)
        h1 = self._biased("d1", self.d1(h0), emb)
        h2 = self._biased("d2", self.d2(h1), emb)
        m = self._biased("mid", self.mid(h2), emb)
        up1 = crop2d(upsample2x(m), 0, 0, h1.shape[2], h1.shape[3])
        g1 = self._biased("u1", add(self.u1(up1), h1), emb)
        up2 = crop2d(upsample2x(g1), 0, 0, h0.shape[2], h0.shape[3])
        g2 = self._biased("u2", add(self.u2(up2), h0), emb)
        return reshape(self.c_out(g2), (b, h, w))


def dsm_loss(net, batch: np.ndarray, rng: np.random.Generator,
             schedule: NoiseSchedule) -> Tensor:
    """Denoising score matching in eps-prediction form: mean squared error
    between predicted and actual perturbation noise, averaged per element."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] < 1:
        raise ParameterError(f"batch must be (B, H, W) and nonempty, got {batch.shape}")
    t = rng.integers(1, schedule.T + 1, size=batch.shape[0])
    x_t, eps = perturb(batch, t, rng, schedule)
    diff = net.forward(Tensor(x_t), t) - Tensor(eps)
    return mean(diff * diff)


def reverse_sample(net, schedule: NoiseSchedule, rng: np.random.Generator,
                   n_samples: int, shape=None, noiseless: bool = False) -> np.ndarray:
    """Ancestral (Euler-Maruyama) reverse pass from pure noise, batched.

    shape defaults to the grid the net was trained on. noiseless=True drops
    the diffusion term (deterministic mean-following trajectory).
    """
    trained = getattr(net, "schedule", None)
    if trained is not None and not trained.matches(schedule):
        raise ConfigError("net was trained under a different noise schedule")
    if shape is None:
        shape = getattr(net, "trained_hw", None)
        if shape is None:
            raise ConfigError("net carries no grid shape; pass shape explicitly")
    if n_samples == 0:
        return np.zeros((0,) + tuple(shape))
    x = rng.standard_normal((n_samples,) + tuple(shape))
    for t in range(schedule.T, 0, -1):
        z = rng.standard_normal(x.shape) if (t > 1 and not noiseless) else None
        x = _reverse_step(net, schedule, x, t, z)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"sampler state diverged at step {t}", step=t)
    return x


def _reverse_step(net, schedule: NoiseSchedule, x: np.ndarray, t: int,
                  z: np.ndarray | None) -> np.ndarray:
    beta = schedule.beta_t(t)
    ab = schedule.alpha_bar_t(t)
    eps_hat = net.forward(Tensor(x), np.full(x.shape[0], t)).data
    mu = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if z is None:
        return mu
    return mu + np.sqrt(beta) * z


def tweedie_denoise(net, x_t, t, schedule: NoiseSchedule):
    """Posterior-mean estimate of the clean signal from a noised state.

    Accepts a plain array (returns an array) or a graph-recorded Tensor
    (returns a Tensor on the same graph, e.g. for likelihood gradients).
    """
    _check_t(t, schedule.T)
    ab = float(schedule.alpha_bar_t(t))
    tensor_in = isinstance(x_t, Tensor)
    xt = x_t if tensor_in else Tensor(np.asarray(x_t, dtype=np.float64))
    tt = np.full(xt.shape[0], t)
    x0 = (xt - net.forward(xt, tt) * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
    return x0 if tensor_in else x0.data


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int
    seed: int
    domain: str  # "image" | "kernel"
    kernel_source: str | None = None  # truth | gan | uniform | mismatch
    batch_size: int = 32
    T: int = 300
    base_channels: int = 8
    emb_dim: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.domain not in ("image", "kernel"):
            raise ConfigError(f"domain must be image or kernel, got {self.domain!r}")
        if self.domain == "image" and self.kernel_source is not None:
            raise ConfigError("kernel_source only applies to the kernel domain")
        if self.domain == "kernel" and self.kernel_source not in (
            "truth", "gan", "uniform", "mismatch",
        ):
            raise ConfigError(f"unknown kernel_source {self.kernel_source!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")


def uniform_kernels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """The 'uniform prior over kernels': iid uniform entries, normalized."""
    u = rng.random((n, k, k))
    return u / u.sum(axis=(1, 2), keepdims=True)


def _meta(config: DiffusionTrainConfig, schedule: NoiseSchedule,
          hw: tuple[int, int]) -> dict:
    return {
        "meta.T": np.array(float(schedule.T)),
        "meta.beta_start": np.array(schedule.beta[0]),
        "meta.beta_end": np.array(schedule.beta[-1]),
        "meta.base_channels": np.array(float(config.base_channels)),
        "meta.emb_dim": np.array(float(config.emb_dim)),
        "meta.grid": np.array([float(hw[0]), float(hw[1])]),
    }


def train_score(config: DiffusionTrainConfig, data: np.ndarray,
                out_dir) -> tuple[Path, Path]:
    """DSM training over a (N, H, W) stack. Returns (checkpoint, loss log)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1:
        raise ConfigError(f"training stack must be (N, H, W), got {data.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = linear_schedule(config.T)
    hw = data.shape[1:]
    net = ScoreNet(rngs.stream(config.seed, "score-init"),
                   config.base_channels, config.emb_dim)
    net.schedule = schedule
    net.trained_hw = hw
    state = init_adam(net.params, config.lr, config.beta1, config.beta2)
    batch_rng = rngs.stream(config.seed, "score-batches")
    tag = config.domain if config.kernel_source is None else (
        f"{config.domain}-{config.kernel_source}"
    )
    log_path = out_dir / f"score_{tag}_losses.csv"
    ckpt_path = out_dir / f"score_{tag}.opfg"
    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["step", "loss"])
        for step in range(1, config.steps + 1):
            idx = batch_rng.integers(0, data.shape[0], size=config.batch_size)
            step_rng = rngs.stream(config.seed, "score-step", step)
            zero_grads(net.params)
            with Graph() as tape:
                loss = dsm_loss(net, data[idx], step_rng, schedule)
            backward(loss, tape)
            val = loss.item()
            if not np.isfinite(val):
                raise DivergenceError(f"dsm loss diverged at step {step}", step=step)
            adam_step(net.params, {n: p.grad for n, p in net.params.items()}, state)
            log.writerow([step, f"{val:.6f}"])
            if step % config.checkpoint_every == 0 and step < config.steps:
                blob = dict(_meta(config, schedule, hw))
                blob.update(net.params)
                save_checkpoint(out_dir / f"score_{tag}_{step:06d}.opfg", blob)
    blob = dict(_meta(config, schedule, hw))
    blob.update(net.params)
    save_checkpoint(ckpt_path, blob)
    return ckpt_path, log_path


def load_score_net(path) -> tuple[ScoreNet, NoiseSchedule]:
    """Rebuild a trained net plus the schedule it was trained under."""
    arrays = load_checkpoint(path)
    for key in ("meta.T", "meta.beta_start", "meta.beta_end",
                "meta.base_channels", "meta.emb_dim", "meta.grid"):
        if key not in arrays:
            raise ConfigError(f"{path} is not a diffusion checkpoint")
    T = int(arrays["meta.T"])
    schedule = NoiseSchedule(
        np.linspace(float(arrays["meta.beta_start"]),
                    float(arrays["meta.beta_end"]), T)
    )
    net = ScoreNet(rngs.stream(0, "score-shell"),
                   int(arrays["meta.base_channels"]), int(arrays["meta.emb_dim"]))
    load_params(net.params, arrays)
    net.schedule = schedule
    net.trained_hw = tuple(int(v) for v in arrays["meta.grid"])
    return net, schedule
