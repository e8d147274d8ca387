"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a closure mapping the output gradient
to input gradients. Node ids come from a global counter, so inputs always have
smaller ids than their outputs and sorting by id gives a topological order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that can carry a gradient.

    ``data`` is never mutated in place; optimizers rebind it to a new array.
    ``grad`` is filled by :meth:`backward` on leaves with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.id = next(_node_ids)
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.op = op
        out.id = next(_node_ids)
        out._consumed = False
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into ``grad`` of every requires_grad leaf.

        Gradients accumulate into existing ``grad`` arrays, so a leaf reached
        from two branches (shared weights) receives the sum. A root may only
        be differentiated once; build a fresh graph to differentiate again.
        """
        if self.ndim != 0:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it before calling again")
        self._consumed = True
        if not self.requires_grad:
            return

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in nodes:
                continue
            nodes[node.id] = node
            stack.extend(p for p in node._parents if p.requires_grad and p.id not in nodes)

        grads: dict[int, np.ndarray] = {self.id: np.ones((), dtype=np.float64)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, name: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcast
    return g if g.shape == shape else np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    on = a.data > 0
    return Tensor._from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped below (zero gradient there)."""
    a = as_tensor(a)
    x = a.data if floor is None else np.maximum(a.data, floor)
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    live = np.ones(a.shape, dtype=bool) if floor is None else a.data >= floor
    return Tensor._from_op(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),), "log")


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for nonnegative ``a``."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("power: negative base")
    p = float(exponent)
    out = np.power(a.data, p)

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        pos = a.data > 0
        base = np.where(pos, a.data, 1.0)
        d = np.where(pos, p * np.power(base, p - 1.0), 1.0 if p == 1.0 else 0.0)
        return (g * d,)

    return Tensor._from_op(out, (a,), backward, "power")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "sqrt": sqrt,
    "scale": scale,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand, or the factor for ``scale``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D tensors, or of equal-length stacks of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axis=None) -> Tensor:
    """``sum`` or ``mean`` over ``axis`` (int, tuple, or None for all)."""
    a = as_tensor(a)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.sum(axis=axes)
    if op == "mean":
        out = out / count
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        g = np.broadcast_to(g.reshape(kept), a.shape)
        return ((g / count) if op == "mean" else g.copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, op)


def _arg_extreme(a, axis: int, pick, name: str) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    idx = np.expand_dims(pick(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax).squeeze(ax)

    def backward(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return Tensor._from_op(out, (a,), backward, name)


def amax(a, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximizer."""
    return _arg_extreme(a, axis, np.argmax, "max")


def amin(a, axis: int) -> Tensor:
    """Minimum along one axis; the gradient goes to the first minimizer."""
    return _arg_extreme(a, axis, np.argmin, "min")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._from_op(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack"
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    """Numpy indexing; integer-array indices may repeat (gradients add up)."""
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = _norm_axes(axis, a.ndim)[0]
    out = np.take(a.data, indices, axis=ax)

    def backward(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (full,)

    return Tensor._from_op(out, (a,), backward, "take")
