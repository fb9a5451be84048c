"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the segmentation networks and their losses need are
provided. Every op records the closure that maps the gradient of its output
to gradients of its inputs; :meth:`Tensor.backward` replays the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph.

    ``data`` is treated as immutable once the tensor is created; only
    ``grad`` is mutated, by :meth:`backward` and :meth:`zero_grad`.
    """

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        graph = Graph.from_output(self)
        graph.backward(grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Graph:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, grad: np.ndarray) -> None:
        output = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data > 0
    scale = np.where(positive, 1.0, slope).astype(x.dtype)

    def backward(g):
        return (g * scale,)

    return _result(x.data * scale, (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


# ----------------------------------------------------------------- reductions


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _result(np.asarray(out), (x,), backward, "mean")


def max_channel(x: Tensor) -> Tensor:
    """Maximum over axis 1, keeping the axis. Ties route gradient to the first."""
    idx = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _result(out, (x,), backward, "max_channel")


# ------------------------------------------------------------ channel handling


def concat_channel(tensors: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward, "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "channel_slice")


def softmax_channel(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (x,), backward, "softmax")


def log_softmax_channel(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------- convolution


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v}")
    return v  # type: ignore[return-value]


def _im2col(xp: np.ndarray, kernel, stride, grid) -> np.ndarray:
    """Gather patches into [kd*kh*kw*C, N*D*H*W] columns (kernel offset major).

    Copies one strided slice per kernel offset, which keeps memory access
    contiguous along x.
    """
    n, c = xp.shape[:2]
    d, h, w = grid
    kd, kh, kw = kernel
    sz, sy, sx = stride
    cols = np.empty((kd, kh, kw, c, n, d, h, w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[a, b, e] = xt[:, :, a : a + sz * d : sz, b : b + sy * h : sy, e : e + sx * w : sx]
    return cols.reshape(kd * kh * kw * c, n * d * h * w)


def _col2im(cols: np.ndarray, n: int, grid, kernel, stride, out_spatial) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns onto an [N,C,...] grid."""
    d, h, w = grid
    kd, kh, kw = kernel
    sz, sy, sx = stride
    c = cols.shape[0] // (kd * kh * kw)
    cols = cols.reshape(kd, kh, kw, c, n, d, h, w)
    out = np.zeros((c, n) + tuple(out_spatial), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, :, a : a + sz * d : sz, b : b + sy * h : sy, e : e + sx * w : sx] += cols[a, b, e]
    return out.transpose(1, 0, 2, 3, 4)


def _out_grid(spatial, kernel, stride) -> tuple[int, int, int]:
    return tuple((s - k) // st + 1 for s, k, st in zip(spatial, kernel, stride))  # type: ignore[return-value]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation with zero padding, input [N,Cin,D,H,W], weight [Cout,Cin,kd,kh,kw]."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has Cin={x.shape[1]} but weight expects Cin={weight.shape[1]}"
        )
    if min(stride) < 1:
        raise ValueError(f"conv3d stride must be >= 1 per axis, got {stride}")
    kernel = weight.shape[2:]
    cout, cin = weight.shape[:2]
    for axis, (size, k, p) in enumerate(zip(x.shape[2:], kernel, padding)):
        if size + 2 * p < k:
            raise ValueError(f"conv3d kernel {k} does not fit spatial axis {axis} of size {size} with padding {p}")
    n = x.shape[0]
    pz, py, px = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px))) if any(padding) else x.data
    grid = _out_grid(xp.shape[2:], kernel, stride)
    cols = _im2col(xp, kernel, stride, grid)
    wmat = weight.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape((cout, n) + grid).transpose(1, 0, 2, 3, 4))

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gmat, n, grid, kernel, stride, xp.shape[2:])
            gx = gxp[:, :, pz : pz + x.shape[2], py : py + x.shape[3], px : px + x.shape[4]]
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape((cout,) + tuple(kernel) + (cin,)).transpose(0, 4, 1, 2, 3)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d")


def conv3d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1) -> Tensor:
    """Transposed 3D convolution, weight [Cin,Cout,kd,kh,kw].

    Output spatial size is ``(in - 1) * stride + kernel`` on every axis; no
    padding or output padding is applied.
    """
    stride = _triple(stride)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d_transposed expects 5-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv3d_transposed channel mismatch: input has Cin={x.shape[1]} but weight expects Cin={weight.shape[0]}"
        )
    if min(stride) < 1:
        raise ValueError(f"conv3d_transposed stride must be >= 1 per axis, got {stride}")
    cin, cout = weight.shape[:2]
    kernel = weight.shape[2:]
    n = x.shape[0]
    grid = x.shape[2:]
    out_spatial = tuple((s - 1) * st + k for s, st, k in zip(grid, stride, kernel))
    xmat = x.data.transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    wmat = weight.data.transpose(2, 3, 4, 1, 0).reshape(-1, cin)
    out = _col2im(wmat @ xmat, n, grid, kernel, stride, out_spatial)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gcols = _im2col(g, kernel, stride, grid)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wmat.T @ gcols).reshape((cin, n) + tuple(grid)).transpose(1, 0, 2, 3, 4)
        if weight.requires_grad:
            gw = (gcols @ xmat.T).reshape(tuple(kernel) + (cout, cin)).transpose(4, 3, 0, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d_transposed")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every (n, c) slice over its voxels, then scale and shift per channel."""
    if x.ndim != 5:
        raise ValueError(f"instance_norm expects [N,C,D,H,W], got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"instance_norm affine parameters must have shape ({x.shape[1]},)")
    if int(np.prod(x.shape[2:])) < 2:
        raise ValueError("instance_norm needs at least 2 voxels per slice")
    axes = (2, 3, 4)
    mu = np.mean(x.data, axis=axes, keepdims=True, dtype=np.float64)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (centered * inv_std).astype(x.dtype)
    g5 = gamma.data.reshape(1, -1, 1, 1, 1)
    out = xhat * g5 + beta.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * g5
            m1 = np.mean(dxhat, axis=axes, keepdims=True, dtype=np.float64)
            m2 = np.mean(dxhat * xhat, axis=axes, keepdims=True, dtype=np.float64)
            gx = (inv_std * (dxhat - m1 - xhat * m2)).astype(x.dtype)
        if gamma.requires_grad:
            ggamma = np.sum(g * xhat, axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
        if beta.requires_grad:
            gbeta = np.sum(g, axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "instance_norm")
