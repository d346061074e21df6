"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation records a closure mapping the output gradient to its input
gradients. `Tensor.backward` walks the recorded graph once in reverse
topological order and then releases it, so a second backward through the
same graph is rejected.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from services.errors import DimensionError, GraphError, LookupIndexError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Settings(threading.local):
    def __init__(self):
        self.dtype = np.dtype(np.float64)
        self.grad_enabled = True


_settings = _Settings()


def get_default_dtype() -> np.dtype:
    return _settings.dtype


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    previous = _settings.dtype
    _settings.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _settings.dtype = previous


def set_default_dtype(dtype) -> None:
    _settings.dtype = np.dtype(dtype)


def is_grad_enabled() -> bool:
    return _settings.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = previous


class Tensor:
    # numpy defers mixed ndarray/Tensor arithmetic to the Tensor operators
    __array_ufunc__ = None
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        array = np.array(data, dtype=dtype or _settings.dtype, copy=True)
        if not np.all(np.isfinite(array)):
            raise DimensionError(f"Tensor {name or '(unnamed)'} holds non-finite values")
        self.data = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out._released = False
        out.requires_grad = _settings.grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- graph execution ------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._released:
            raise GraphError("backward already ran through this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("backward called on a tensor that does not require gradients")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        graph = ComputeGraph.from_root(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in graph.order:
            g = pending.pop(id(node), None)
            if node._released:
                raise GraphError("graph reuses a node whose backward already ran; rebuild it with a new forward pass")
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, parent_grad in zip(node._parents, node._backward(g)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
            node._backward = None
            node._parents = ()
            node._released = True

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


@dataclass(frozen=True)
class GraphNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, in reverse topological order (root first)."""

    order: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> ComputeGraph:
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        topo.reverse()
        return cls(order=topo)

    @property
    def nodes(self) -> list[GraphNode]:
        """Operation records in execution order."""
        return [
            GraphNode(op=t.op, input_ids=tuple(id(p) for p in t._parents), output_id=id(t))
            for t in reversed(self.order)
        ]


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent
    return Tensor._result(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return Tensor._result(out, (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions -----------------------------------------------------------
def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {original} as {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along one axis; `indices` may be any integer array."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    length = a.shape[axis]
    if indices.size and (indices.min() < -length or indices.max() >= length):
        raise LookupIndexError(f"take: index out of range for axis {axis} of length {length}")
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (full,)

    return Tensor._result(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, backward, "concat")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; `widths` gives (before, after) for every axis."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != a.ndim:
        raise DimensionError(f"pad: got {len(widths)} pad pairs for a {a.ndim}-d tensor")
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return Tensor._result(np.pad(a.data, widths), (a,), lambda g: (g[slices],), "pad")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {original} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g, original),), "broadcast")


def straight_through(a: Tensor, value: np.ndarray) -> Tensor:
    """Forward returns `value`; backward passes the gradient to `a` unchanged."""
    value = np.asarray(value, dtype=a.dtype)
    if value.shape != a.shape:
        raise DimensionError(f"straight_through: value shape {value.shape} differs from input {a.shape}")
    return Tensor._result(value.copy(), (a,), lambda g: (g,), "straight_through")
