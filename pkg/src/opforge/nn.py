"""Small layer library on top of the autodiff ops.

Layers own their parameters as named Tensors; a network is a composition of
layers plus a params() dict for the optimizer and checkpointing. Weight init
follows fan-in scaling with an explicit rng so builds are reproducible.
"""

import numpy as np

from .autodiff import Tensor, conv2d, conv_transpose2d, matmul, add
from .errors import ShapeError

__all__ = ["Dense", "Conv", "ConvT", "time_embedding", "merge_params", "load_params"]


class Dense:
    def __init__(self, rng, n_in: int, n_out: int, name: str, gain: float = 1.0):
        std = gain / np.sqrt(n_in)
        self.w = Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True,
                        name=f"{name}.w")
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


class Conv:
    """Strided zero-padded convolution layer, NCHW."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, pad: int,
                 name: str, gain: float = 1.4142135623730951):
        std = gain / np.sqrt(c_in * k * k)
        self.w = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


class ConvT:
    """Transposed convolution layer for upsampling, NCHW."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, pad: int,
                 name: str, gain: float = 1.0):
        std = gain / np.sqrt(c_in * k * k)
        self.w = Tensor(rng.normal(0.0, std, (c_in, c_out, k, k)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


def time_embedding(steps: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of integer diffusion steps, shape (B, dim)."""
    if dim % 2 != 0:
        raise ShapeError(f"embedding dim must be even, got {dim}")
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def merge_params(*layers) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for layer in layers:
        for name, p in layer.params().items():
            if name in out:
                raise ShapeError(f"duplicate parameter name {name!r}")
            out[name] = p
    return out


def load_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                prefix: str = "") -> None:
    """Copy checkpoint arrays into live parameters, strict on names/shapes."""
    want = {prefix + name for name in params}
    have = set(arrays)
    if not want <= have:
        missing = sorted(want - have)[:4]
        raise ShapeError(f"checkpoint missing parameters, e.g. {missing}")
    for name, p in params.items():
        arr = arrays[prefix + name]
        if arr.shape != p.data.shape:
            raise ShapeError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs {p.data.shape}"
            )
        p.data = arr.copy()
