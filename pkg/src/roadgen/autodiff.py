"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation on `Tensor`s records a backward closure, and
`backward()` on a scalar root replays them in reverse topological order.  The
graph is rebuilt on every forward pass; nothing is cached across steps.

Conventions pinned by tests:
  - all values are float64,
  - ReLU and sqrt use subgradient 0 at input 0,
  - binary ops follow numpy broadcasting (gradients are summed back to the
    operand's shape), incompatible shapes raise ShapeError.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, MathDomainError, NumericError, ShapeError

Array = np.ndarray


def _as_array(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


def _sum_to_shape(grad: Array, shape: tuple[int, ...]) -> Array:
    """Undo numpy broadcasting: reduce `grad` back to `shape` by summation."""
    if grad.shape == shape:
        return grad
    # sum away leading broadcast axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[Array], None] | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph mechanics --------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.shape, dtype=np.float64)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root; fills .grad on every
        requires_grad tensor reachable from it."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with requires_grad=False")
        order = _toposort(self)
        self.grad = np.ones(self.shape, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; every node appears after all its parents
    would in a forward ordering (so reversed() visits each exactly once)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _binary(a: Tensor, b: Tensor, out_data: Array,
            da: Callable[[Array], Array], db: Callable[[Array], Array]) -> Tensor:
    req = a.requires_grad or b.requires_grad
    if not req:
        return Tensor(out_data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_sum_to_shape(da(g), a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(db(g), b.shape))

    return Tensor(out_data, True, (a, b), backward)


def _unary(a: Tensor, out_data: Array, da: Callable[[Array], Array]) -> Tensor:
    if not a.requires_grad:
        return Tensor(out_data)

    def backward(g: Array) -> None:
        a._accumulate(_sum_to_shape(da(g), a.shape))

    return Tensor(out_data, True, (a,), backward)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise MathDomainError("div: divisor contains zero")
    return _binary(a, b, a.data / b.data,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def neg(a: Tensor) -> Tensor:
    return _unary(a, -a.data, lambda g: -g)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed to non-finite values")
    return _unary(a, out, lambda g: g * out)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise MathDomainError("log of a non-positive value")
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise MathDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def da(g: Array) -> Array:
        # subgradient 0 at exactly 0, like relu
        safe = np.where(a.data > 0.0, out, 1.0)
        return np.where(a.data > 0.0, g / (2.0 * safe), 0.0)

    return _unary(a, out, da)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    return _binary(a, b, a.data @ b.data,
                   lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    return _unary(a, a.data.T.copy(), lambda g: g.T)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
    old = a.shape
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(old))


# -- reductions -----------------------------------------------------------

def _check_axis(a: Tensor, axis: int | None, op: str) -> None:
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {a.data.ndim}")


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis, "sum")
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        ge = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(ge, a.shape).copy()

    return _unary(a, out, da)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a: Tensor, axis: int = 1, mask: Array | None = None) -> Tensor:
    """Row-stable log(sum(exp)) over one axis of a 2-d tensor, optionally
    restricted to a boolean mask.  Every row must select at least one entry."""
    if a.data.ndim != 2 or axis != 1:
        raise ShapeError("logsumexp is implemented for 2-d tensors over axis 1")
    x = a.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeError(f"logsumexp mask shape {m.shape} != data shape {x.shape}")
    if not np.all(m.any(axis=1)):
        raise ContractError("logsumexp: a row selects no entries")
    neg_inf = np.where(m, x, -np.inf)
    rowmax = neg_inf.max(axis=1, keepdims=True)
    expd = np.where(m, np.exp(x - rowmax), 0.0)
    sums = expd.sum(axis=1)
    out = rowmax[:, 0] + np.log(sums)

    def da(g: Array) -> Array:
        softmax = expd / sums[:, None]
        return g[:, None] * softmax

    return _unary(a, out, da)


# -- indexed selection ----------------------------------------------------

def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds them back."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def da(g: Array) -> Array:
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return full

    return _unary(a, out, da)


def take(a: Tensor, rows, cols) -> Tensor:
    """Pick a.data[rows[i], cols[i]] into a 1-d tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"take needs a 2-d tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape:
        raise ContractError("take: rows and cols differ in length")
    out = a.data[rows, cols]

    def da(g: Array) -> Array:
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, (rows, cols), g)
        return full

    return _unary(a, out, da)
