"""Dense n-dimensional tensors with a reverse-mode gradient tape.

Every differentiable operation that touches a tensor with ``requires_grad``
appends a node to the thread-local tape.  :func:`backward` walks the tape in
reverse and returns the gradients of all reachable leaves, then drops the
tape.  Operations executed under :func:`no_grad` never record anything.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "set_precision",
    "get_dtype",
    "precision",
    "grad_check",
    "record",
    "matmul",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "layernorm",
    "relu",
    "exp",
    "log",
    "concat",
    "where",
    "embedding",
    "zeros",
]

_local = threading.local()
_DTYPE = [np.float32]


def _tape() -> list:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = []
    return tape


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def set_precision(name: str) -> None:
    """Select the global float type: ``"float32"`` or ``"float64"``."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    _DTYPE[0] = np.dtype(name).type


def get_dtype():
    return _DTYPE[0]


@contextlib.contextmanager
def precision(name: str):
    prev = np.dtype(_DTYPE[0]).name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE[0])
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other, self)))

    def __rsub__(self, other):
        return _add(_lift(other, self), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return _mul(self, _lift(1.0 / np.asarray(other), self))
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __pow__(self, exponent: float):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- shape / reductions ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    @property
    def T(self):
        return self.transpose()


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward_fn`` maps the output gradient to a tuple with one gradient (or
    ``None``) per parent.  A node is appended to the tape only when gradients
    are enabled and some parent requires them.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        _tape().append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def _div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return record(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def where(cond: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``cond`` holds, else the constant ``fill``."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, np.asarray(fill, dtype=a.data.dtype))
    return record(out, (a,), lambda g: (_unbroadcast(g * cond, a.shape),))


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: collapse leading axes instead of a batched product
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record(out, (a, b), backward_fn)


# -- shape -----------------------------------------------------------------
def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out), (a,), backward_fn)


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic(index)

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.data.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return record(table.data[ids], (table,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE[0]), requires_grad=requires_grad)


# -- normalisation ---------------------------------------------------------
def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise FloatingPointError(f"NaN input to {what}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward_fn)


def masked_softmax(x: Tensor, mask: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax with ``mask == False`` positions at -inf; fully masked rows give 0."""
    if mask is None:
        return softmax(x, axis)
    _check_finite(x.data, "masked_softmax")
    mask = np.broadcast_to(mask, x.shape)
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)
    return record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layernorm(h: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = h.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward_fn(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, _unbroadcast(ggamma, gamma.shape), _unbroadcast(gbeta, beta.shape)

    return record(out, (h, gamma, beta), backward_fn)


# -- gradients -------------------------------------------------------------
def backward(root: Tensor) -> dict:
    """Back-propagate from scalar ``root``; returns ``{leaf: grad array}``.

    Leaves not reachable from ``root`` are absent from the map.  The tape is
    cleared afterwards.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = _tape()
    leaves: dict = {}
    try:
        if not root.requires_grad:
            raise ValueError("root is not on the active tape")
        if root.is_leaf:
            leaves[root] = np.ones_like(root.data)
            return leaves
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    prev = leaves.get(parent)
                    leaves[parent] = pg if prev is None else prev + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        return leaves
    finally:
        tape.clear()


def clear_tape() -> None:
    _tape().clear()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    clear_tape()
    leaf = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True, dtype=np.float64)
    with precision("float64"):
        out = f(leaf)
        analytic = backward(out).get(leaf, np.zeros_like(leaf.data))
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(leaf).data.sum())
                flat[i] = orig - eps
                fm = float(f(leaf).data.sum())
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

