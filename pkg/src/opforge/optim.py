"""Adam with bias correction, operating on named parameter dicts in place."""

import numpy as np

from .autodiff import Tensor
from .errors import DivergenceError

__all__ = ["OptimState", "init_adam", "adam_step"]


class OptimState:
    """Moment buffers and step counter for one parameter set."""

    __slots__ = ("lr", "beta1", "beta2", "eps", "step", "m", "v")

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def init_adam(params: dict[str, Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    state = OptimState(lr, beta1, beta2, eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimState) -> None:
    """One update. Raises DivergenceError if any gradient is non-finite;
    parameters are untouched in that case."""
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for parameter {name!r} at step {state.step + 1}",
                step=state.step + 1, param=name,
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
