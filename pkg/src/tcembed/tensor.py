"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions.  ``backward`` walks
the recorded graph in reverse topological order.  Gradients accumulate
until :meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericDomainError",
    "DegenerateInputError",
    "no_grad",
    "is_grad_enabled",
    "make_rng",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "softmax_rows",
    "log_softmax_rows",
    "logsumexp_rows",
    "elementwise",
    "l2_normalize",
    "concat",
    "stack",
    "take_rows",
    "L2_EPS",
]

L2_EPS = 1e-12

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ArithmeticError):
    """An op was evaluated outside its domain (division by zero, log of x <= 0)."""


class DegenerateInputError(ValueError):
    """Input too close to zero to normalize."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / benchmarking)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical draw sequences."""
    return np.random.default_rng(seed)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out dimensions that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph construction --------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise ValueError("loss is not connected to any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -------------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # method-style shortcuts
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

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


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# binary ops
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor._make(out, (a, b), backward)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules on leading dimensions."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# unary ops
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x: Tensor, exponent: float) -> Tensor:
    if exponent < 0 and np.any(x.data == 0):
        raise NumericDomainError("negative power of zero")
    out = x.data ** exponent
    return Tensor._make(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return Tensor._make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def softmax_rows(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is a constant added to the logits first."""
    z = x.data - x.data.max(axis=axis, keepdims=True) if mask is None else x.data + mask
    if mask is not None:
        z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    s = z

    def backward(g):
        out = g * s
        out -= s * out.sum(axis=axis, keepdims=True)
        return (out,)

    return Tensor._make(s, (x,), backward)


def log_softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def logsumexp_rows(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    total = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    s = e / total

    def backward(g):
        return (np.expand_dims(g, axis) * s,)

    return Tensor._make(out, (x,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "silu": silu,
    "softmax_rows": softmax_rows,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named elementwise ops."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(out, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return reduce_sum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (x,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return Tensor._make(out, (table,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), backward)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Scale every vector along ``axis`` to unit Euclidean norm.

    Vectors whose norm is below ``eps`` raise :class:`DegenerateInputError`
    instead of being clamped.
    """
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateInputError(f"cannot L2-normalize a vector with norm < {eps:g}")
    out = v.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (v,), backward)
