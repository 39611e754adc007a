"""Ground-truth blur kernel families: anisotropic Gaussian and motion streaks.

Both samplers return a :class:`Psf`, a nonnegative unit-sum k x k stencil.
The motion family is a heading-diffusion random walk rasterized by bilinear
splatting; it produces connected, curved streaks. All sampling is driven by
an explicit numpy Generator so callers control determinism.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = [
    "Psf", "GaussianBlurParams", "GaussianPrior", "MotionConfig",
    "MotionTrajectory", "gaussian_psf", "sample_gaussian_params",
    "sample_gaussian_psf", "sample_motion_trajectory", "rasterize_trajectory",
    "sample_motion_psf",
]

_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Psf:
    """A k x k convolution stencil: nonnegative weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ParameterError(f"psf must be square, got shape {w.shape}")
        if w.shape[0] % 2 == 0:
            raise ParameterError(f"psf size must be odd, got {w.shape[0]}")
        if np.any(w < 0):
            raise ParameterError("psf weights must be nonnegative")
        if abs(w.sum() - 1.0) > _SUM_TOL:
            raise ParameterError(f"psf weights sum to {w.sum():.12f}, expected 1")

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class GaussianBlurParams:
    sigma_x: float
    sigma_y: float
    theta: float  # radians, canonical range [0, pi)

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ParameterError(
                f"sigmas must be positive, got ({self.sigma_x}, {self.sigma_y})"
            )
        if not (0.0 <= self.theta < np.pi):
            raise ParameterError(f"theta {self.theta} outside [0, pi)")


@dataclass(frozen=True)
class GaussianPrior:
    """Uniform prior over blur widths (and orientation when anisotropic)."""

    sigma_lo: float = 0.6
    sigma_hi: float = 3.0
    isotropic: bool = False

    def __post_init__(self):
        if not (0 < self.sigma_lo <= self.sigma_hi):
            raise ParameterError(
                f"bad sigma range [{self.sigma_lo}, {self.sigma_hi}]"
            )


def gaussian_psf(params: GaussianBlurParams, k: int) -> Psf:
    """Rotated anisotropic Gaussian density at pixel centers, renormalized."""
    if k % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {k}")
    c = k // 2
    dy, dx = np.mgrid[0:k, 0:k].astype(np.float64)
    dy -= c
    dx -= c
    ct, st = np.cos(params.theta), np.sin(params.theta)
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    dens = np.exp(
        -(u * u) / (2.0 * params.sigma_x**2) - (v * v) / (2.0 * params.sigma_y**2)
    )
    return Psf(dens / dens.sum())


def sample_gaussian_params(rng: np.random.Generator, prior: GaussianPrior) -> GaussianBlurParams:
    sx = rng.uniform(prior.sigma_lo, prior.sigma_hi)
    sy = sx if prior.isotropic else rng.uniform(prior.sigma_lo, prior.sigma_hi)
    theta = rng.uniform(0.0, np.pi)
    return GaussianBlurParams(sigma_x=sx, sigma_y=sy, theta=theta)


def sample_gaussian_psf(rng: np.random.Generator, prior: GaussianPrior, k: int) -> Psf:
    return gaussian_psf(sample_gaussian_params(rng, prior), k)


@dataclass(frozen=True)
class MotionConfig:
    """Heading-diffusion walk: each step turns by a Gaussian increment and
    advances step_size pixels. The finished walk is recentered in the frame."""

    kernel_size: int = 17
    steps: int = 24
    step_size: float = 0.35
    turn_sigma: float = 0.35
    initial_heading: float | None = None  # None draws uniform [0, 2pi)

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ParameterError(f"kernel size must be odd, got {self.kernel_size}")
        if self.steps < 1:
            raise ParameterError("need at least one trajectory point")
        if self.step_size < 0 or self.turn_sigma < 0:
            raise ParameterError("step_size and turn_sigma must be nonnegative")


@dataclass(frozen=True)
class MotionTrajectory:
    points: np.ndarray  # (n, 2) float (row, col) in kernel-frame coordinates

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ParameterError(f"trajectory needs (n,2) points, got {pts.shape}")


_MAX_RESAMPLES = 100


def sample_motion_trajectory(rng: np.random.Generator, config: MotionConfig) -> MotionTrajectory:
    """Walk, recenter the bounding box onto the kernel center, retry on escape.

    Points land inside [0, k-1] on both axes so the bilinear footprint of
    every point stays on the grid.
    """
    k = config.kernel_size
    c = k // 2
    for _ in range(_MAX_RESAMPLES):
        if config.initial_heading is None:
            heading = rng.uniform(0.0, 2.0 * np.pi)
        else:
            heading = float(config.initial_heading)
        turns = rng.normal(0.0, config.turn_sigma, size=config.steps - 1)
        headings = heading + np.concatenate([[0.0], np.cumsum(turns)])
        drows = config.step_size * np.sin(headings[:-1])
        dcols = config.step_size * np.cos(headings[:-1])
        rows = np.concatenate([[0.0], np.cumsum(drows)])
        cols = np.concatenate([[0.0], np.cumsum(dcols)])
        rows += c - (rows.max() + rows.min()) / 2.0
        cols += c - (cols.max() + cols.min()) / 2.0
        inside = (
            rows.min() >= 0.0 and rows.max() <= k - 1
            and cols.min() >= 0.0 and cols.max() <= k - 1
        )
        if inside:
            return MotionTrajectory(np.stack([rows, cols], axis=1))
    raise ParameterError(
        f"trajectory escaped a {k}x{k} frame {_MAX_RESAMPLES} times; "
        f"shrink step_size*steps"
    )


def rasterize_trajectory(traj: MotionTrajectory, k: int) -> Psf:
    """Bilinear splat of each point, then normalization to unit sum."""
    if k % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {k}")
    pts = traj.points
    if pts.shape[0] < 1:
        raise ParameterError("empty trajectory")
    if pts.min() < 0 or pts.max() > k - 1 + 1e-12:
        raise ParameterError("trajectory point outside the kernel frame")
    # one padding row/col so floor+1 of an edge point stays indexable
    buf = np.zeros((k + 1, k + 1))
    r0 = np.floor(pts[:, 0]).astype(int)
    c0 = np.floor(pts[:, 1]).astype(int)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    np.add.at(buf, (r0, c0), (1 - fr) * (1 - fc))
    np.add.at(buf, (r0, c0 + 1), (1 - fr) * fc)
    np.add.at(buf, (r0 + 1, c0), fr * (1 - fc))
    np.add.at(buf, (r0 + 1, c0 + 1), fr * fc)
    grid = buf[:k, :k]
    return Psf(grid / grid.sum())


def sample_motion_psf(rng: np.random.Generator, config: MotionConfig) -> Psf:
    return rasterize_trajectory(
        sample_motion_trajectory(rng, config), config.kernel_size
    )
