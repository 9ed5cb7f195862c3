"""Dense tensors with define-by-run reverse-mode autodiff.

Every op records its parents and a closure mapping the output adjoint to one
adjoint per parent. ``backward`` walks the recorded tape once, in reverse
topological order, and frees it; a second walk over a consumed tape raises.

Broadcasting is deliberately narrow: python scalars against any tensor, and a
``1 x N`` row vector against an ``M x N`` matrix. Anything else must match
exactly.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, GraphError, NumericError

DEFAULT_DTYPE = np.float64
NORM_EPS = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                             and data.dtype in (np.float32, np.float64)
                                             else DEFAULT_DTYPE))
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Record a primitive. ``backward(g)`` returns one adjoint (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._freed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise DimensionError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the loss")
        if not self.requires_grad:
            raise GraphError("loss is detached: nothing on its graph requires grad")

        order = _topo_order(self)
        adj = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        for node in order:
            if node._backward is not None:
                node._freed = True
                node._backward = None
                node._parents = ()


def _raise_not_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the loss")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: input contains NaN or Inf")


def _require_2d(t: Tensor, op: str) -> None:
    if t.ndim != 2:
        raise DimensionError(f"{op} expects a matrix, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return Tensor.from_op(a.data + float(b), (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))
    # row vector + matrix, either order
    if a.ndim == 2 and b.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return Tensor.from_op(a.data + b.data, (a, b),
                              lambda g: (g, g.sum(axis=0, keepdims=True)))
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return add(b, a)
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not compatible")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    return add(a, neg(as_tensor(b)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(as_tensor(a), b)
    if _is_scalar(a):
        return scale(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    # 0-d tensor times anything
    if a.ndim == 0:
        return Tensor.from_op(a.data * b.data, (a, b),
                              lambda g: (np.sum(g * b.data), g * a.data))
    if b.ndim == 0:
        return mul(b, a)
    raise DimensionError(f"mul: shapes {a.shape} and {b.shape} must match exactly")


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """Scale row i of an M x N matrix by w[i]; w is M x 1. Explicit, never implied by ``*``."""
    _require_2d(x, "row_scale")
    if w.shape != (x.shape[0], 1):
        raise DimensionError(f"row_scale: weights {w.shape} do not fit rows of {x.shape}")
    X, W = x.data, w.data
    return Tensor.from_op(X * W, (x, w), lambda g: (g * W, (g * X).sum(axis=1, keepdims=True)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return Tensor.from_op(y, (a,), bw)


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return Tensor.from_op(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over everything (0-d result) or over one axis of a matrix (keeps dims)."""
    if axis is None:
        shape = a.shape
        return Tensor.from_op(np.array(a.data.sum()), (a,),
                              lambda g: (np.broadcast_to(g, shape).copy(),))
    _require_2d(a, "sum")
    shape = a.shape
    return Tensor.from_op(a.data.sum(axis=axis, keepdims=True), (a,),
                          lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat along axis {axis}: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), parts,
                          lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(a: Tensor, idx) -> Tensor:
    _require_2d(a, "take_rows")
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), bw)


# ---------------------------------------------------------------------------
# row-wise normalizers


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax with max subtraction; entries outside ``mask`` get weight 0."""
    _require_2d(x, "softmax_rows")
    _check_finite(x.data, "softmax_rows")
    if mask is None:
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape or not mask.any(axis=1).all():
            raise DimensionError("softmax_rows: mask must match the input and keep one entry per row")
        masked = np.where(mask, x.data, -np.inf)
        e = np.where(mask, np.exp(masked - masked.max(axis=1, keepdims=True)), 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    return Tensor.from_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    _require_2d(x, "log_softmax_rows")
    _check_finite(x.data, "log_softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return Tensor.from_op(y, (x,), lambda g: (g - sm * g.sum(axis=1, keepdims=True),))


def logsumexp_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``log sum_j exp x_ij`` over the entries where ``mask`` is true; result is M x 1."""
    _require_2d(x, "logsumexp_rows")
    _check_finite(x.data, "logsumexp_rows")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"logsumexp_rows: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=1).all():
        raise NumericError("logsumexp_rows: a row has no included entries")
    masked = np.where(mask, x.data, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    w = e / s
    return Tensor.from_op(m + np.log(s), (x,), lambda g: (w * g,))


def l2_normalize_rows(x: Tensor) -> Tensor:
    _require_2d(x, "l2_normalize_rows")
    n = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    bad = np.flatnonzero(n[:, 0] <= NORM_EPS)
    if bad.size:
        raise DegenerateVectorError(f"l2_normalize_rows: row {int(bad[0])} has zero norm", row=int(bad[0]))
    y = x.data / n
    return Tensor.from_op(y, (x,), lambda g: ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,))


# ---------------------------------------------------------------------------
# composites


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product, M x 1."""
    return tsum(mul(a, b), axis=1)


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    return row_dot(l2_normalize_rows(a), l2_normalize_rows(b))


def cross_entropy(target: np.ndarray, logits: Tensor) -> Tensor:
    """Mean over rows of ``-sum_k target_k log softmax(logits)_k``; target is a constant."""
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise DimensionError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
    return scale(tsum(mul(Tensor(target, dtype=logits.dtype), log_softmax_rows(logits))),
                 -1.0 / logits.shape[0])


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy (nats) of a 1 x K distribution."""
    return neg(tsum(mul(p, log(p))))


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
