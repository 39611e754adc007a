"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are recorded onto that
graph (the tape) whenever any input requires gradients. :func:`backward`
replays the tape in reverse and accumulates ``grad`` buffers on every
participating tensor. Without an active graph, ops run as plain numpy with no
recording and outputs never require grad, which doubles as inference mode.

A graph must not outlive in-place updates to the arrays it captured: run
optimizer steps only after backward is done and the graph is discarded.
"""

import numpy as np
from scipy.signal import convolve2d

from .errors import GraphError, NumericError, ParameterError, ShapeError

__all__ = [
    "Tensor", "Graph", "backward",
    "add", "sub", "mul", "div", "neg", "pow_", "exp", "log",
    "matmul", "sum_", "mean", "reshape", "relu", "leaky_relu", "softplus",
    "softmax", "softmax_flat", "crop2d", "upsample2x",
    "conv2d_circular", "conv2d", "conv_transpose2d",
    "set_requires_grad", "zero_grads",
]


class Tensor:
    """A dense float64 array plus gradient metadata."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Recording tape. Use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self, "graph stack corrupted"
        return False

    def __len__(self):
        return len(self.nodes)


_GRAPH_STACK: list[Graph] = []


def _active() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _emit(op: str, inputs: tuple, data: np.ndarray, backward_fn) -> Tensor:
    graph = _active()
    if graph is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        graph.nodes.append(Node(op, inputs, out, backward_fn))
        return out
    return Tensor(data)


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every requires_grad tensor.

    ``loss`` must be scalar. Repeated calls without zero_grads accumulate.
    Nodes not on a path to the loss are skipped.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = flows.pop(id(node.output), None)
        if g is None:
            continue
        holders.pop(id(node.output), None)
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        input_grads = node.backward(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = flows.get(id(t))
            flows[id(t)] = gi if prev is None else prev + gi
            holders[id(t)] = t
    for tid, g in flows.items():
        t = holders[tid]
        t.grad = g if t.grad is None else t.grad + g


def set_requires_grad(params, flag: bool) -> None:
    for t in (params.values() if isinstance(params, dict) else params):
        t.requires_grad = bool(flag)


def zero_grads(params) -> None:
    for t in (params.values() if isinstance(params, dict) else params):
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit("add", (a, b), data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit("sub", (a, b), data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), data, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _emit("div", (a, b), data, bwd)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def pow_(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _emit("pow", (a,), data, bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _emit("exp", (a,), data, lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _emit("log", (a,), data, lambda g: (g / a.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), data, bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _emit("sum", (a,), data, bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(data.size, 1)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _emit("mean", (a,), data, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _emit("reshape", (a,), data, lambda g: (g.reshape(a.data.shape),))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    return _emit("relu", (a,), data, lambda g: (np.where(a.data > 0, g, 0.0),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)
    return _emit(
        "leaky_relu", (a,), data, lambda g: (np.where(a.data > 0, g, slope * g),)
    )


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated stably for large |a|."""
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        # derivative is sigmoid(a), computed without overflow
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        e = np.exp(a.data[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _emit("softplus", (a,), data, bwd)


def softmax(a: Tensor, axes=None) -> Tensor:
    """Stabilized softmax over `axes` (None means all entries jointly)."""
    if axes is None:
        axes = tuple(range(a.ndim)) if a.ndim else ()
    axes = (axes,) if np.isscalar(axes) else tuple(axes)
    if a.ndim == 0:
        data = np.ones_like(a.data)
        return _emit("softmax", (a,), data, lambda g: (np.zeros_like(g),))
    m = a.data.max(axis=axes, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axes, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axes, keepdims=True)
        return (data * (g - dot),)

    return _emit("softmax", (a,), data, bwd)


def softmax_flat(a: Tensor) -> Tensor:
    """Softmax over every entry of the tensor; output sums to 1."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_flat requires finite input")
    return softmax(a, axes=None)


# ---------------------------------------------------------------------------
# spatial ops


def crop2d(a: Tensor, top: int, left: int, out_h: int, out_w: int) -> Tensor:
    h, w = a.data.shape[-2:]
    if top < 0 or left < 0 or top + out_h > h or left + out_w > w:
        raise ShapeError(
            f"crop window ({top},{left},{out_h},{out_w}) exceeds input {a.data.shape}"
        )
    data = a.data[..., top : top + out_h, left : left + out_w].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., top : top + out_h, left : left + out_w] = g
        return (full,)

    return _emit("crop2d", (a,), data, bwd)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    data = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)

    def bwd(g):
        lead = g.shape[:-2]
        h2, w2 = g.shape[-2:]
        gg = g.reshape(*lead, h2 // 2, 2, w2 // 2, 2)
        return (gg.sum(axis=(-3, -1)),)

    return _emit("upsample2x", (a,), data, bwd)


# ---------------------------------------------------------------------------
# circular convolution (the physics op)


def _check_circular_shapes(x: np.ndarray, k: np.ndarray):
    if x.ndim == 2 and k.ndim == 2:
        batched = False
    elif x.ndim == 3 and k.ndim == 3:
        if x.shape[0] != k.shape[0]:
            raise ShapeError(
                f"batch sizes differ: input {x.shape[0]} vs kernel {k.shape[0]}"
            )
        batched = True
    else:
        raise ShapeError(
            f"conv2d_circular expects HxW with kxk, or batched 3-d pairs; "
            f"got {x.shape} and {k.shape}"
        )
    kh, kw = k.shape[-2:]
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {k.shape[-2:]}")
    if kh % 2 == 0:
        raise ParameterError(f"even kernel size {kh} unsupported")
    h, w = x.shape[-2:]
    if kh > min(h, w):
        raise ShapeError(f"kernel size {kh} exceeds image extent {(h, w)}")
    return batched, kh


def _kernel_spectrum(k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """rfft2 of the kernel embedded at the origin of an HxW grid, center first."""
    h, w = shape
    kk = k.shape[-1]
    c = kk // 2
    pad = np.zeros(k.shape[:-2] + (h, w))
    pad[..., :kk, :kk] = k
    pad = np.roll(pad, (-c, -c), axis=(-2, -1))
    return np.fft.rfft2(pad)


def _corr_window(g: np.ndarray, x: np.ndarray, kk: int) -> np.ndarray:
    """d/dk of sum(g * circ_conv(x, k)): circular correlation sampled on the
    kxk offset window centered at c = kk//2."""
    h, w = x.shape[-2:]
    c = kk // 2
    corr = np.fft.irfft2(np.conj(np.fft.rfft2(g)) * np.fft.rfft2(x), s=(h, w))
    rows = (c - np.arange(kk)) % h
    cols = (c - np.arange(kk)) % w
    return corr[..., rows[:, None], cols[None, :]]


def conv2d_circular(x: Tensor, k: Tensor) -> Tensor:
    """Circular 2-d convolution: out[i,j] = sum_uv k[u,v] x[(i-u+c)%H,(j-v+c)%W].

    The single-image form (HxW with kxk) is computed by direct spatial
    convolution. The batched form (B,H,W with B,k,k, convolved itemwise) runs
    through the Fourier domain for speed; the spatial form is its test oracle.
    Differentiable in both arguments.
    """
    xd, kd = x.data, k.data
    batched, kk = _check_circular_shapes(xd, kd)

    if not batched:
        data = convolve2d(xd, kd, mode="same", boundary="wrap")

        def bwd(g):
            gx = (
                convolve2d(g, kd[::-1, ::-1], mode="same", boundary="wrap")
                if x.requires_grad
                else None
            )
            gk = _corr_window(g, xd, kk) if k.requires_grad else None
            return gx, gk

        return _emit("conv2d_circular", (x, k), data, bwd)

    h, w = xd.shape[-2:]
    spec_k = _kernel_spectrum(kd, (h, w))
    data = np.fft.irfft2(np.fft.rfft2(xd) * spec_k, s=(h, w))

    def bwd_batched(g):
        gx = (
            np.fft.irfft2(np.fft.rfft2(g) * np.conj(spec_k), s=(h, w))
            if x.requires_grad
            else None
        )
        gk = _corr_window(g, xd, kk) if k.requires_grad else None
        return gx, gk

    return _emit("conv2d_circular", (x, k), data, bwd_batched)


# ---------------------------------------------------------------------------
# strided convolutions for the networks (zero padding, NCHW)


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c * kh * kw
    )
    return col, ho, wo


def _col2im(col, b, c, hp, wp, kh, kw, s, ho, wo):
    g = col.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, hp, wp))
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + s * ho : s, v : v + s * wo : s] += g[:, :, u, v]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided zero-padded convolution. x: (B,C,H,W); w: (F,C,kh,kw); b: (F,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d got input {xd.shape}, weight {wd.shape}")
    bsz, cin, h, wdt = xd.shape
    f, _, kh, kw = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = wd.reshape(f, cin * kh * kw)
    out = (col @ wmat.T).reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[:, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, f)
        gw = (gmat.T @ col).reshape(f, cin, kh, kw) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcol = gmat @ wmat
            gxp = _col2im(gcol, bsz, cin, h + 2 * pad, wdt + 2 * pad, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + wdt]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out, bwd)


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: int = 2, pad: int = 1
) -> Tensor:
    """Transposed convolution. x: (B,C,H,W); w: (C,F,kh,kw); output
    spatial size (H-1)*stride - 2*pad + kh."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"conv_transpose2d got input {xd.shape}, weight {wd.shape}")
    bsz, cin, hi, wi = xd.shape
    _, f, kh, kw = wd.shape
    ho = (hi - 1) * stride - 2 * pad + kh
    wo = (wi - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"degenerate output size {(ho, wo)}")
    xmat = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)).reshape(bsz * hi * wi, cin)
    wmat = wd.reshape(cin, f * kh * kw)
    colt = xmat @ wmat
    outp = _col2im(colt, bsz, f, ho + 2 * pad, wo + 2 * pad, kh, kw, stride, hi, wi)
    out = np.ascontiguousarray(outp[:, :, pad : pad + ho, pad : pad + wo])
    if b is not None:
        out = out + b.data[:, None, None]

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        colg, nh, nw = _im2col(gp, kh, kw, stride)
        assert nh == hi and nw == wi
        gx = (
            np.ascontiguousarray(
                (colg @ wmat.T).reshape(bsz, hi, wi, cin).transpose(0, 3, 1, 2)
            )
            if x.requires_grad
            else None
        )
        gw = (xmat.T @ colg).reshape(cin, f, kh, kw) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv_transpose2d", inputs, out, bwd)
