"""Image and kernel reconstruction metrics.

Kernel similarity uses MNC: the maximum over all circular shifts of the
normalized cross-correlation. Unlike MSE it is insensitive to the arbitrary
translation ambiguity of blind deconvolution, which is exactly why it is the
headline kernel metric here.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .data import EvalView, load_stack
from .errors import ParameterError, ShapeError

__all__ = ["psnr", "ssim", "mse", "mae", "mnc", "MetricReport", "evaluate_run"]

PSNR_CAP_DB = 200.0


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(x: np.ndarray, y: np.ndarray) -> float:
    _check_same_shape(x, y)
    return float(np.mean((x - y) ** 2))


def mae(x: np.ndarray, y: np.ndarray) -> float:
    _check_same_shape(x, y)
    return float(np.mean(np.abs(x - y)))


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 200 dB (the zero-MSE sentinel)."""
    err = mse(x, y)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / err), PSNR_CAP_DB)


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    g = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * sigma * sigma))
    return g / g.sum()


_WINDOW = _ssim_window()
_C1 = 0.01**2
_C2 = 0.03**2


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window, dynamic range 1."""
    _check_same_shape(x, y)
    if min(x.shape) < _WINDOW.shape[0]:
        raise ShapeError(f"image {x.shape} smaller than the {_WINDOW.shape} window")

    def smooth(a):
        return convolve2d(a, _WINDOW, mode="valid")

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _C1) * (2 * cov + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    return float(np.mean(num / den))


def mnc(k: np.ndarray, k_hat: np.ndarray) -> float:
    """max over circular shifts s of <k, shift_s(k_hat)> / (|k| |k_hat|)."""
    _check_same_shape(k, k_hat)
    nk = np.sqrt(np.sum(k * k))
    nh = np.sqrt(np.sum(k_hat * k_hat))
    if nk == 0.0 or nh == 0.0:
        raise ParameterError("mnc undefined for a zero-norm kernel")
    corr = np.fft.irfft2(
        np.fft.rfft2(k) * np.conj(np.fft.rfft2(k_hat)), s=k.shape
    )
    return float(np.clip(corr.max() / (nk * nh), 0.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    per_item: dict
    mean: dict
    std: dict
    count: int

    def __post_init__(self):
        for name, vals in self.per_item.items():
            got = float(np.mean(vals))
            if abs(got - self.mean[name]) > 1e-12 * max(1.0, abs(got)):
                raise ParameterError(f"aggregate mean inconsistent for {name}")


_COLUMNS = ["psnr", "ssim", "mse_img", "mae_img", "mse_ker", "mae_ker", "mnc"]


def evaluate_run(view: EvalView, recon_images: np.ndarray,
                 recon_kernels: np.ndarray, out_csv=None) -> MetricReport:
    """Score aligned reconstructions against an eval dataset's truth."""
    n = len(view.clean_paths)
    if len(recon_images) != n or len(recon_kernels) != n:
        raise ShapeError(
            f"expected {n} reconstructions, got {len(recon_images)} images "
            f"and {len(recon_kernels)} kernels"
        )
    clean = load_stack(view.clean_paths)
    truth_k = load_stack(view.truth_kernel_paths)
    per = {name: np.zeros(n) for name in _COLUMNS}
    for i in range(n):
        per["psnr"][i] = psnr(clean[i], recon_images[i])
        per["ssim"][i] = ssim(clean[i], recon_images[i])
        per["mse_img"][i] = mse(clean[i], recon_images[i])
        per["mae_img"][i] = mae(clean[i], recon_images[i])
        per["mse_ker"][i] = mse(truth_k[i], recon_kernels[i])
        per["mae_ker"][i] = mae(truth_k[i], recon_kernels[i])
        per["mnc"][i] = mnc(truth_k[i], recon_kernels[i])
    report = MetricReport(
        per_item=per,
        mean={name: float(np.mean(v)) for name, v in per.items()},
        std={name: float(np.std(v)) for name, v in per.items()},
        count=n,
    )
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item"] + _COLUMNS)
            for i in range(n):
                w.writerow([i] + [f"{per[c][i]:.6f}" for c in _COLUMNS])
            w.writerow(["mean"] + [f"{report.mean[c]:.6f}" for c in _COLUMNS])
    return report
