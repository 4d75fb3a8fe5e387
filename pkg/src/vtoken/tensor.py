"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Each op records its parents and a closure mapping the output gradient to
one gradient per parent. :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates into the ``grad`` field of leaf
tensors that have ``requires_grad`` set.

The scalar width defaults to 32-bit and can be switched to 64-bit with the
``VTOKEN_FLOAT=64`` environment variable or :func:`set_default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_DTYPE = np.float64 if os.environ.get("VTOKEN_FLOAT", "32") == "64" else np.float32
_GRAD_ENABLED = True

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def default_dtype():
    return _DTYPE


def set_default_dtype(bits: int):
    """Select 32- or 64-bit floats for newly created tensors; returns the previous dtype."""
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"unsupported float width {bits}")
    prev = _DTYPE
    _DTYPE = np.float64 if bits == 64 else np.float32
    return prev


@contextlib.contextmanager
def float_width(bits: int):
    prev = set_default_dtype(bits)
    try:
        yield
    finally:
        set_default_dtype(64 if prev == np.float64 else 32)


@contextlib.contextmanager
def no_grad():
    """Ops executed inside this block record no graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DTYPE
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # ---- basic attributes ----
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # ---- operators ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # ---- reverse pass ----
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf with ``requires_grad``."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def _suffix_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(b_shape) < len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape):
        return
    raise ShapeError(f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} are incompatible "
                     "(only trailing-axis bias broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        out = a.data + b
        return _result(out, (a,), lambda g: (g,), "add_scalar")
    _suffix_broadcast(a.shape, b.shape, "add")
    bshape = b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bshape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -b)
    _suffix_broadcast(a.shape, b.shape, "sub")
    bshape = b.shape
    return _result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bshape)), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _suffix_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x  # explicit products; float32 pow is slow
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result(out, (a,), backward, "gelu")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis; a constant slice maps to zeros."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gamma is not None:
        _suffix_broadcast(d.shape, gamma.shape, "layer_norm")
        out = out * gamma.data
    if beta is not None:
        _suffix_broadcast(d.shape, beta.shape, "layer_norm")
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return _result(out, parents, backward, "layer_norm")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; masked entries get no gradient."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _result(out, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),),
                   "masked_fill")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        da = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            db = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(ad, -1, -2) @ g
        return da, db

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),),
                   "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- reductions & indexing

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


def index(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing (basic or advanced); gradient scatters back with accumulation."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), backward, "index")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise ShapeError(f"embedding: id {bad} outside table of {table.shape[0]} rows")
    out = index(table, ids)
    out.op = "embedding"
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")
