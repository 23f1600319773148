"""Dense float64 tensors with a recorded computation graph for reverse-mode AD.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient, the result keeps references to its parents together with a closure
that maps the output gradient to per-parent gradients. :func:`backward` walks
that record once in reverse topological order.

Arrays may carry any number of leading batch axes: ``conv2d`` and
``avg_pool`` act on the trailing ``C x H x W`` (or ``H x W``) extents.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InvalidArgumentError

DTYPE = np.float64
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # Identity semantics: tensors are used as dict keys in gradient maps.
    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; records the op only when needed.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                       "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / b.data, a.shape),
                                  _unbroadcast(-g * out / b.data, b.shape)),
                       "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def unary(x: Tensor, value: np.ndarray, derivative: np.ndarray, op: str) -> Tensor:
    """Elementwise op whose local derivative is supplied precomputed."""
    return make_result(value, (x,), lambda g: (g * derivative,), op)


# --- shape / reduction -----------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = sum_(x, axis, keepdims)
    return mul(total, total.size / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(x.data[index], (x,), backward_fn, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, backward_fn, "stack")


# --- layers ----------------------------------------------------------------

def _correlate(xp: np.ndarray, kmat: np.ndarray, k: int, stride: int, c_out: int, keep_cols: bool = False):
    """Valid cross-correlation of ``xp[N, C, H, W]`` via im2col.

    ``kmat`` is the kernel bank flattened to ``[C_out, C*k*k]``.
    """
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h_out * w_out, c * k * k)
    out = (cols @ kmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return (out, cols) if keep_cols else out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[..., C_in, H, W]`` with ``kernels[C_out, C_in, k, k]``."""
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if kernels.ndim != 4 or x.ndim < 3:
        raise DimensionError(f"conv2d expects x[..., C, H, W] and kernels[O, C, k, k], "
                             f"got {x.shape} and {kernels.shape}")
    c_out, c_in, k, k2 = kernels.shape
    lead, (c, h, w) = x.shape[:-3], x.shape[-3:]
    if c != c_in:
        raise DimensionError(f"kernels expect {c_in} input channels, input has {c}")
    if k != k2:
        raise DimensionError(f"only square kernels are supported, got {k}x{k2}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{w} (padding {padding})")

    xb = x.data.reshape((-1, c, h, w))
    n = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    kmat = kernels.data.reshape(c_out, c * k * k)
    out, cols = _correlate(xp, kmat, k, stride, c_out, keep_cols=True)
    h_out, w_out = out.shape[-2:]
    out = out.reshape(lead + (c_out, h_out, w_out))

    def backward_fn(g):
        gmat = np.ascontiguousarray(g.reshape(n, c_out, h_out * w_out).transpose(0, 2, 1)).reshape(-1, c_out)
        g_kernels = (gmat.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        g_x = None
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                # full correlation of the output gradient with the flipped kernels
                edge = k - 1 - padding
                gp = np.pad(g.reshape(n, c_out, h_out, w_out), ((0, 0), (0, 0), (edge, edge), (edge, edge)))
                flipped = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, c_out * k * k)
                g_x = _correlate(gp, flipped, k, 1, c).reshape(x.shape)
            else:
                gcols = (gmat @ kmat).reshape(n, h_out, w_out, c, k, k)
                g_xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
                for i in range(k):
                    for j in range(k):
                        g_xp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += gcols[..., i, j]
                g_xp = g_xp.transpose(0, 3, 1, 2)
                if padding:
                    g_xp = g_xp[:, :, padding:-padding, padding:-padding]
                g_x = np.ascontiguousarray(g_xp).reshape(x.shape)
        return g_x, g_kernels

    return make_result(out, (x, kernels), backward_fn, "conv2d")


class RunningStats:
    """Per-channel running mean/variance buffers of a batch-norm layer."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Normalize channel axis 1 of ``x[N, C, ...]`` (``x[C, ...]`` is one sample).

    In training mode the batch statistics are used and ``stats`` is updated
    in place by exponential moving average (unbiased variance).
    """
    squeeze = x.ndim == 3 or x.ndim == 1
    data = x.data[None] if squeeze else x.data
    channels = data.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"gamma/beta must have shape ({channels},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, data.ndim))
    bshape = (1, channels) + (1,) * (data.ndim - 2)
    count = data.size // channels if channels else 0

    if training:
        if count == 0:
            raise InvalidArgumentError("batch_norm in train mode needs a non-empty batch")
        mu = data.mean(axis=axes)
        var = data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mu
        stats.var *= 1.0 - momentum
        stats.var += momentum * unbiased
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_fn(g):
        g = g[None] if squeeze else g
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_x = None
        if x.requires_grad:
            g_xhat = g * gamma.data.reshape(bshape)
            if training:
                g_x = (inv_std.reshape(bshape) / count) * (
                    count * g_xhat
                    - g_xhat.sum(axis=axes).reshape(bshape)
                    - xhat * (g_xhat * xhat).sum(axis=axes).reshape(bshape))
            else:
                g_x = g_xhat * inv_std.reshape(bshape)
            g_x = g_x.reshape(x.shape)
        return g_x, g_gamma, g_beta

    return make_result(out.reshape(x.shape), (x, gamma, beta), backward_fn, "batch_norm")


def avg_pool(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling over the last two axes."""
    if kernel < 1:
        raise InvalidArgumentError(f"pooling kernel must be positive, got {kernel}")
    if kernel == 1:
        return x
    h, w = x.shape[-2:]
    if h % kernel or w % kernel:
        raise DimensionError(f"pool kernel {kernel} does not divide spatial extents {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // kernel, kernel, w // kernel, kernel)).mean(axis=(-3, -1))
    scale = 1.0 / (kernel * kernel)

    def backward_fn(g):
        return (np.repeat(np.repeat(g, kernel, axis=-2), kernel, axis=-1) * scale,)

    return make_result(out, (x,), backward_fn, "avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for ``x[D_in]`` or a batch ``x[N, D_in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        return ((g @ weight.data).reshape(x.shape), g2.T @ x2, g2.sum(axis=0))

    return make_result(out, (x, weight, bias), backward_fn, "linear")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward_fn, "log_softmax")


# --- reverse pass ----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) to every leaf that requires a gradient.

    Returns a map leaf -> gradient and also stores each gradient on ``leaf.grad``.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = topological_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaves


def grads_of(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` for the given leaves (zeros where unreachable)."""
    found = backward(root)
    return [found.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]
