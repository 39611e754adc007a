"""Adversarial learning of the blur-operator distribution.

The generator maps latents to convolution kernels. Fake measurements are
built by blurring clean images with generated kernels and adding the exact
noise level of the real measurement set, so the discriminator compares
distributions of measurements, never kernels or paired images. With the
softmax head every generated kernel is a valid PSF by construction; the
unconstrained head exists to reproduce the normalization ablation.
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
    conv2d_circular,
    crop2d,
    leaky_relu,
    mean,
    neg,
    reshape,
    set_requires_grad,
    softmax,
    softplus,
    zero_grads,
)
from .data import DatasetManifest, TrainingView, load_stack, training_view
from .errors import ConfigError, DivergenceError, ParameterError, ShapeError
from .fileio import load_checkpoint, save_checkpoint
from .nn import Conv, ConvT, Dense, load_params, merge_params
from .optim import OptimState, adam_step, init_adam

__all__ = [
    "GeneratorNet", "DiscriminatorNet", "GanTrainConfig",
    "generate_psf", "sample_psfs", "gan_losses", "train_step", "train",
    "load_generator",
]

_MAP = 32          # the generator paints kernels on a fixed 32x32 canvas, then crops
_BLOB_SIGMA = 1.4  # width of the centered bump the output bias starts from
_EMA_DECAY = 0.9995  # checkpoint average spans roughly one oscillation period


def _upsample_filling(rng, w: np.ndarray) -> np.ndarray:
    """Near-bilinear weights for a stride-2 transposed conv.

    Pure bilinear taps plus small noise, so the stack begins as a smooth
    upsampler instead of a random mixer. Without this the early generator
    favors isolated bright pixels, and the softmax head cannot pull mass
    back once a cell has gone dark.
    """
    taps = np.array([0.25, 0.75, 0.75, 0.25])
    kernel = np.outer(taps, taps)
    c_in, c_out = w.shape[:2]
    per = max(c_in // c_out, 1)
    out = np.zeros_like(w)
    for i in range(c_in):
        out[i, i % c_out] = kernel / per
    return out + 0.01 * rng.standard_normal(w.shape)


def _centered_bump_logits() -> np.ndarray:
    # -r^2 / (2 sigma^2) around the crop center: softmax of this alone is a
    # normalized isotropic blur, which puts step zero inside the kernel family
    yy, xx = np.mgrid[0:_MAP, 0:_MAP]
    ctr = (_MAP - 1) // 2
    r2 = (yy - ctr) ** 2 + (xx - ctr) ** 2
    return -r2 / (2.0 * _BLOB_SIGMA ** 2)


class GeneratorNet:
    """latent -> dense -> 4x4 map -> three transposed-conv blocks -> k x k head.

    The transposed convs start near bilinear upsampling and the output block
    carries a per-pixel bias initialized to a centered radial bump, so the
    first samples are already smooth normalized kernels. Training then moves
    within the family rather than fighting its way into it.
    """

    def __init__(self, rng, latent_dim: int = 64, kernel_size: int = 17,
                 head_mode: str = "softmax"):
        if head_mode not in ("softmax", "unconstrained"):
            raise ConfigError(f"unknown head_mode {head_mode!r}")
        if kernel_size % 2 == 0 or not (1 <= kernel_size <= _MAP):
            raise ParameterError(f"kernel size must be odd and <= {_MAP}")
        self.latent_dim = latent_dim
        self.kernel_size = kernel_size
        self.head_mode = head_mode
        self.dense = Dense(rng, latent_dim, 4 * 4 * 64, "dense")
        self.up1 = ConvT(rng, 64, 32, 4, 2, 1, "up1")
        self.up2 = ConvT(rng, 32, 16, 4, 2, 1, "up2")
        self.up3 = ConvT(rng, 16, 1, 4, 2, 1, "up3")
        for layer in (self.up1, self.up2, self.up3):
            layer.w.data = _upsample_filling(rng, layer.w.data)
        self.pixel_bias = Tensor(_centered_bump_logits(), requires_grad=True,
                                 name="up3.pixel_bias")
        self.params = merge_params(self.dense, self.up1, self.up2, self.up3)
        self.params["up3.pixel_bias"] = self.pixel_bias

    def forward(self, z: Tensor) -> Tensor:
        """(B, latent_dim) -> (B, k, k) kernel maps."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent batch must be (B, {self.latent_dim}), got {z.shape}")
        b = z.shape[0]
        h = leaky_relu(self.dense(z))
        h = reshape(h, (b, 64, 4, 4))
        h = leaky_relu(self.up1(h))
        h = leaky_relu(self.up2(h))
        h = self.up3(h)
        h = add(h, reshape(self.pixel_bias, (1, 1, _MAP, _MAP)))
        off = (_MAP - self.kernel_size) // 2
        k = crop2d(h, off, off, self.kernel_size, self.kernel_size)
        k = reshape(k, (b, self.kernel_size, self.kernel_size))
        if self.head_mode == "softmax":
            k = softmax(k, axes=(1, 2))
        return k


class DiscriminatorNet:
    """Three strided conv blocks over measurements, then a scalar logit."""

    def __init__(self, rng, image_shape: tuple[int, int]):
        h, w = image_shape
        if h % 8 != 0 or w % 8 != 0:
            raise ShapeError(f"image extents must be divisible by 8, got {image_shape}")
        self.image_shape = (h, w)
        self.c1 = Conv(rng, 1, 16, 4, 2, 1, "c1")
        self.c2 = Conv(rng, 16, 32, 4, 2, 1, "c2")
        self.c3 = Conv(rng, 32, 64, 4, 2, 1, "c3")
        self.flat_dim = 64 * (h // 8) * (w // 8)
        self.head = Dense(rng, self.flat_dim, 1, "head")
        self.params = merge_params(self.c1, self.c2, self.c3, self.head)

    def forward(self, x: Tensor) -> Tensor:
        """(B, H, W) measurements -> (B, 1) logits."""
        if x.ndim != 3 or x.shape[1:] != self.image_shape:
            raise ShapeError(f"expected (B, {self.image_shape}), got {x.shape}")
        b = x.shape[0]
        h = reshape(x, (b, 1) + self.image_shape)
        h = leaky_relu(self.c1(h))
        h = leaky_relu(self.c2(h))
        h = leaky_relu(self.c3(h))
        return self.head(reshape(h, (b, self.flat_dim)))


@dataclass(frozen=True)
class GanTrainConfig:
    steps: int
    noise_sigma: float
    seed: int
    batch_size: int = 32
    latent_dim: int = 64
    kernel_size: int = 17
    head_mode: str = "softmax"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay_from: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.head_mode not in ("softmax", "unconstrained"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if not 0.0 < self.lr_decay_from <= 1.0:
            raise ConfigError("lr_decay_from must be in (0, 1]")


def generate_psf(g: GeneratorNet, z: np.ndarray) -> np.ndarray:
    """One kernel from one latent vector; pure function of (weights, z)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (g.latent_dim,):
        raise ShapeError(f"latent must have length {g.latent_dim}, got {z.shape}")
    return g.forward(Tensor(z[None, :])).data[0]


def sample_psfs(g: GeneratorNet, rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, k, k) kernels from fresh standard-normal latents."""
    z = rng.standard_normal((n, g.latent_dim))
    return g.forward(Tensor(z)).data


def gan_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Discriminator cross-entropy and the non-saturating generator loss.

    d = -[mean ln s(real) + mean ln(1 - s(fake))], g = -mean ln s(fake),
    both written with softplus so large logits cannot overflow.
    """
    d_loss = mean(softplus(neg(real_logits))) + mean(softplus(fake_logits))
    g_loss = mean(softplus(neg(fake_logits)))
    return d_loss, g_loss


def _fake_measurements(kernels: Tensor, clean: np.ndarray, sigma: float,
                       eps: np.ndarray | None) -> Tensor:
    meas = conv2d_circular(Tensor(clean), kernels)
    if sigma > 0:
        meas = meas + Tensor(sigma * eps)
    return meas


def train_step(g: GeneratorNet, d: DiscriminatorNet, clean_batch: np.ndarray,
               real_batch: np.ndarray, noise_sigma: float,
               rng: np.random.Generator, g_state: OptimState,
               d_state: OptimState, step: int = 0) -> tuple[float, float]:
    """One simultaneous update: D on real-vs-fake, then G through the chain.

    The same latents and noise draws serve both phases; only the G phase
    records the generator's graph.
    """
    bsz = clean_batch.shape[0]
    z = rng.standard_normal((bsz, g.latent_dim))
    eps = rng.standard_normal(clean_batch.shape) if noise_sigma > 0 else None

    # discriminator phase: generated kernels held fixed
    fake_fixed = _fake_measurements(
        g.forward(Tensor(z)).detach(), clean_batch, noise_sigma, eps
    ).data
    zero_grads(d.params)
    with Graph() as tape:
        d_loss_t, _ = gan_losses(d.forward(Tensor(real_batch)),
                                 d.forward(Tensor(fake_fixed)))
    backward(d_loss_t, tape)
    d_loss = d_loss_t.item()
    if not np.isfinite(d_loss):
        raise DivergenceError(f"discriminator loss diverged at step {step}", step=step)
    adam_step(d.params, {n: p.grad for n, p in d.params.items()}, d_state)

    # generator phase: full differentiable chain, discriminator frozen
    zero_grads(g.params)
    set_requires_grad(d.params, False)
    try:
        with Graph() as tape:
            fake = _fake_measurements(g.forward(Tensor(z)), clean_batch,
                                      noise_sigma, eps)
            g_loss_t = mean(softplus(neg(d.forward(fake))))
        backward(g_loss_t, tape)
    finally:
        set_requires_grad(d.params, True)
    g_loss = g_loss_t.item()
    if not np.isfinite(g_loss):
        raise DivergenceError(f"generator loss diverged at step {step}", step=step)
    adam_step(g.params, {n: p.grad for n, p in g.params.items()}, g_state)
    return d_loss, g_loss


def _meta(g: GeneratorNet) -> dict[str, np.ndarray]:
    return {
        "meta.latent_dim": np.array(float(g.latent_dim)),
        "meta.kernel_size": np.array(float(g.kernel_size)),
        "meta.head_softmax": np.array(1.0 if g.head_mode == "softmax" else 0.0),
    }


def _save(path, g: GeneratorNet, d: DiscriminatorNet,
          g_arrays: dict[str, np.ndarray] | None = None) -> None:
    blob = dict(_meta(g))
    blob.update({f"G.{n}": (g_arrays[n] if g_arrays else p)
                 for n, p in g.params.items()})
    blob.update({f"D.{n}": p for n, p in d.params.items()})
    save_checkpoint(path, blob)


def load_generator(path) -> GeneratorNet:
    """Rebuild the generator (architecture plus weights) from a checkpoint."""
    arrays = load_checkpoint(path)
    for key in ("meta.latent_dim", "meta.kernel_size", "meta.head_softmax"):
        if key not in arrays:
            raise ConfigError(f"{path} is not an operator-GAN checkpoint")
    g = GeneratorNet(
        rngs.stream(0, "generator-shell"),
        latent_dim=int(arrays["meta.latent_dim"]),
        kernel_size=int(arrays["meta.kernel_size"]),
        head_mode="softmax" if arrays["meta.head_softmax"] else "unconstrained",
    )
    load_params(g.params, arrays, prefix="G.")
    return g


def train(config: GanTrainConfig, manifest: DatasetManifest, root,
          out_dir) -> tuple[Path, Path]:
    """Full training run. Returns (final checkpoint path, loss log path)."""
    return train_from_view(config, training_view(manifest, root), out_dir)


def train_from_view(config: GanTrainConfig, view: TrainingView,
                    out_dir) -> tuple[Path, Path]:
    if abs(view.noise_sigma - config.noise_sigma) > 1e-12:
        raise ConfigError(
            f"config noise_sigma {config.noise_sigma} does not match "
            f"dataset noise_sigma {view.noise_sigma}"
        )
    clean_set = set(map(str, view.clean_paths))
    if clean_set & set(map(str, view.measurement_paths)):
        raise ConfigError("clean and measurement file sets overlap")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = load_stack(view.clean_paths)
    real = load_stack(view.measurement_paths)

    g = GeneratorNet(rngs.stream(config.seed, "gan-init-g"), config.latent_dim,
                     config.kernel_size, config.head_mode)
    d = DiscriminatorNet(rngs.stream(config.seed, "gan-init-d"), view.image_shape)
    g_state = init_adam(g.params, config.lr, config.beta1, config.beta2)
    d_state = init_adam(d.params, config.lr, config.beta1, config.beta2)

    batch_rng = rngs.stream(config.seed, "gan-batches")
    log_path = out_dir / "gan_losses.csv"
    ckpt_path = out_dir / "gan_final.opfg"
    # checkpoints hold a bias-corrected exponential moving average of the
    # generator, which irons out the slow oscillation the adversarial game
    # never settles from; the correction makes a 1-step run save its live
    # weights exactly
    g_avg = {n: np.zeros_like(p.data) for n, p in g.params.items()}

    def averaged(step: int) -> dict[str, np.ndarray]:
        fix = 1.0 - _EMA_DECAY ** step
        return {n: a / fix for n, a in g_avg.items()}

    # both learning rates ramp linearly to zero over the tail of the run;
    # the frozen endgame lets the moving average settle instead of chasing
    # a still-oscillating generator
    cut = int(round(config.lr_decay_from * config.steps))

    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh)
        log.writerow(["step", "d_loss", "g_loss"])
        for step in range(1, config.steps + 1):
            if step > cut:
                factor = (config.steps - step + 1) / (config.steps - cut + 1)
                g_state.lr = config.lr * factor
                d_state.lr = config.lr * factor
            ci = batch_rng.integers(0, clean.shape[0], size=config.batch_size)
            ri = batch_rng.integers(0, real.shape[0], size=config.batch_size)
            step_rng = rngs.stream(config.seed, "gan-step", step)
            d_loss, g_loss = train_step(
                g, d, clean[ci], real[ri], config.noise_sigma, step_rng,
                g_state, d_state, step,
            )
            for n, p in g.params.items():
                g_avg[n] += (1.0 - _EMA_DECAY) * (p.data - g_avg[n])
            log.writerow([step, f"{d_loss:.6f}", f"{g_loss:.6f}"])
            if step % config.checkpoint_every == 0 and step < config.steps:
                _save(out_dir / f"gan_{step:06d}.opfg", g, d, averaged(step))
    _save(ckpt_path, g, d, averaged(config.steps))
    return ckpt_path, log_path
