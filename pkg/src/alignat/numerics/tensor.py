"""Dense f64 tensors with reverse-mode differentiation.

Every value is a row-major ``numpy.float64`` array wrapped in a :class:`Tensor`
node. Operations build a tape (DAG of parent links plus backward closures);
``Tensor.backward()`` on a scalar loss walks it once in reverse topological
order. The op set is deliberately small: exactly what a small transformer
stack needs, with no generic broadcasting beyond row-vector biases.

Tensors are immutable after construction except for ``grad``. A graph is
single-use: rebuild it per step, or :class:`GraphError` is raised on a second
backward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import GraphError, ShapeMismatchError

Array = np.ndarray


def _as_f64(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_backward_run")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._backward_run = False

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ----------------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every reachable node that requires it."""
        if self.data.size != 1:
            raise ShapeMismatchError("backward() requires a scalar loss")
        if self._backward_run:
            raise GraphError("backward() already ran on this graph; build a fresh graph")
        self._backward_run = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, other, negate_rhs=True)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    """A non-trainable leaf."""
    return Tensor(data, requires_grad=False, name=name)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b, negate_rhs: bool = False) -> Tensor:
    """a + b, where b is a Tensor of equal shape, a (d,) row bias, or a scalar."""
    if not isinstance(b, Tensor):
        out_data = a.data - b if negate_rhs else a.data + b

        def bwd_const(g: Array, a=a):
            a._accumulate(g)

        return Tensor(out_data, _parents=(a,), _backward=bwd_const)

    sign = -1.0 if negate_rhs else 1.0
    if a.shape == b.shape:
        def bwd_same(g: Array, a=a, b=b, sign=sign):
            a._accumulate(g)
            b._accumulate(sign * g)

        return Tensor(a.data + sign * b.data, _parents=(a, b), _backward=bwd_same)

    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd_bias(g: Array, a=a, b=b, sign=sign):
            a._accumulate(g)
            b._accumulate(sign * g.sum(axis=0))

        return Tensor(a.data + sign * b.data[None, :], _parents=(a, b), _backward=bwd_bias)

    raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with an equal-shape Tensor, an ndarray constant, or a scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}")

        def bwd_pair(g: Array, a=a, b=b):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return Tensor(a.data * b.data, _parents=(a, b), _backward=bwd_pair)

    c = b if np.isscalar(b) else _as_f64(b)

    def bwd_const(g: Array, a=a, c=c):
        a._accumulate(g * c)

    return Tensor(a.data * c, _parents=(a,), _backward=bwd_const)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g: Array, a=a, b=b):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g: Array, a=a):
        a._accumulate(g.T)

    return Tensor(a.data.T, _parents=(a,), _backward=bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: Array, a=a):
        a._accumulate(np.full_like(a.data, float(g.reshape(()))))

    return Tensor(a.data.sum(), _parents=(a,), _backward=bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g: Array, a=a, n=n):
        a._accumulate(np.full_like(a.data, float(g.reshape(())) / n))

    return Tensor(a.data.mean(), _parents=(a,), _backward=bwd)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bwd(g: Array, a=a, keep=keep):
        a._accumulate(g * keep)

    return Tensor(np.where(keep, a.data, 0.0), _parents=(a,), _backward=bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError("slice_cols expects a matrix")

    def bwd(g: Array, a=a, start=start, stop=stop):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    return Tensor(a.data[:, start:stop], _parents=(a,), _backward=bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError("slice_rows expects a matrix")

    def bwd(g: Array, a=a, start=start, stop=stop):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop, :] = g
            a._accumulate(full)

    return Tensor(a.data[start:stop, :], _parents=(a,), _backward=bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat_cols of nothing")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def bwd(g: Array, parts=tuple(parts), offsets=offsets):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            p._accumulate(g[:, j0:j1])

    return Tensor(np.concatenate([p.data for p in parts], axis=1), _parents=tuple(parts), _backward=bwd)


def gather_rows(weight: Tensor, ids: Iterable[int]) -> Tensor:
    """Row lookup (embedding); backward scatter-adds into the table."""
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError("gather_rows expects a flat id list")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ShapeMismatchError(
            f"gather_rows: id out of range 0..{weight.shape[0] - 1}"
        )

    def bwd(g: Array, weight=weight, idx=idx):
        if weight.requires_grad:
            full = np.zeros_like(weight.data)
            np.add.at(full, idx, g)
            weight._accumulate(full)

    return Tensor(weight.data[idx], _parents=(weight,), _backward=bwd)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of a matrix, numerically stabilised."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: Array, a=a, out=out):
        # dx = (g - sum(g*y)) * y per row
        dot = (g * out).sum(axis=-1, keepdims=True)
        a._accumulate((g - dot) * out)

    return Tensor(out, _parents=(a,), _backward=bwd)


def log_row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g: Array, a=a, out=out):
        a._accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return Tensor(out, _parents=(a,), _backward=bwd)


def masked_fill(a: Tensor, keep: Array, fill_value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``fill_value`` (constant mask)."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeMismatchError(f"masked_fill: mask {keep.shape} vs tensor {a.shape}")

    def bwd(g: Array, a=a, keep=keep):
        a._accumulate(np.where(keep, g, 0.0))

    return Tensor(np.where(keep, a.data, fill_value), _parents=(a,), _backward=bwd)
