"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a row-major ``numpy`` array. Operations
record their inputs and a closure computing input gradients from the output
gradient; :meth:`Tensor.backward` replays those closures in reverse creation
order. Gradients accumulate (``+=``) into ``.grad`` and must be cleared with
:meth:`Tensor.zero_grad` between optimisation steps.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "InvalidMaskError",
    "GradCheckError",
    "tensor",
    "zeros",
    "make_op",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "swish",
    "exp",
    "log",
    "relu",
    "softmax_masked",
    "log_softmax",
    "layer_norm",
    "concat",
    "stack",
    "embedding",
    "gather",
    "depthwise_conv1d_causal",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidMaskError(ValueError):
    """An attention mask leaves some row with no visible position."""


class GradCheckError(RuntimeError):
    """The function under gradient check is not deterministic."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    # autodiff ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = _reachable(self)
        nodes.sort(key=lambda n: n._id, reverse=True)
        grads = {self._id: np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _reachable(root: Tensor) -> list:
    seen = {root._id}
    out = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                out.append(p)
                stack.append(p)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward`` maps the output gradient to one gradient per parent (or
    ``None``). Nothing is recorded when grad is disabled or no parent needs a
    gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return make_op(data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return make_op(data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    y = a.data * s
    return make_op(y, (a,), lambda g: (g * (s + y * (1.0 - s)),), "swish")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return make_op(a.data * m, (a,), lambda g: (g * m,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,), "log")


# structural ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with matching leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return make_op(A @ B, (a, b), backward, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(np.array(a.data[idx]), (a,), backward, "slice")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one part")
    ndim = parts[0].ndim
    ax = axis % ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: off-axis extents differ, {ref} vs {p.shape}"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return make_op(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts], axis)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of ``table`` at ``ids``; an empty ``ids`` yields a 0-row tensor."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(table.data[idx], (table,), backward, "embedding")


def gather(a: Tensor, index, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with gradient scattered back to the source."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % len(shape)] = index
        np.add.at(out, tuple(idx), g)
        return (out,)

    return make_op(np.take_along_axis(a.data, index, axis), (a,), backward, "gather")


# normalisation ---------------------------------------------------------------

def softmax_masked(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get exactly 0."""
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if x.shape[-1] == 0 or not mask.any(axis=-1).all():
        raise InvalidMaskError("softmax row has no unmasked position")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y[~mask] = 0.0

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_op(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm parameters {gamma.shape}/{beta.shape} do not match input {x.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(xhat * G + beta.data, (x, gamma, beta), backward, "layer_norm")


def depthwise_conv1d_causal(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with ``k-1`` zeros of left padding.

    ``x`` is ``[T, d]``, ``kernel`` is ``[k, d]``; output row ``t`` uses input
    rows ``t-k+1 .. t`` only, with ``kernel[k-1]`` weighting the current row.
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"depthwise conv shapes {x.shape} and {kernel.shape} differ")
    T, d = x.shape
    k = kernel.shape[0]
    xp = np.concatenate([np.zeros((k - 1, d)), x.data], axis=0)
    W = kernel.data
    out = np.zeros((T, d))
    for j in range(k):
        out += xp[j:j + T] * W[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(W)
        for j in range(k):
            gxp[j:j + T] += g * W[j]
            gw[j] = (g * xp[j:j + T]).sum(axis=0)
        return gxp[k - 1:], gw

    return make_op(out, (x, kernel), backward, "dwconv")


# gradient checking -----------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    again = f(Tensor(base.copy()))
    if not np.array_equal(out.data, again.data):
        raise GradCheckError("function gave different results on identical input")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            fp = f(Tensor(xp.reshape(base.shape))).item()
            xp[i] -= 2 * h
            fm = f(Tensor(xp.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
