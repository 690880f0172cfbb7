"""Dense tensors with a tape-based reverse-mode autodiff graph.

Every differentiable operation that touches a ``requires_grad`` input appends
a :class:`Node` carrying its inputs and a closure mapping the output gradient
to input gradients. Node ids come from a global counter, so sorting nodes by
id is a valid topological order: an op's inputs always exist before it does.
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_default_dtype = np.dtype(np.float32)
_debug = os.environ.get("STEAD_DEBUG", "") not in ("", "0")
_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors, e.g. ``float64`` for gradient checks."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug(flag: bool) -> None:
    """Toggle the finiteness assertion run after every forward op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op!r})"


class Tensor:
    """Immutable n-d array of reals, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def min(self, axis=None, keepdims: bool = False):
        return min_(self, axis, keepdims)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce binary-op operands; bare scalars adopt the tensor partner's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a node when any input needs gradients.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    if _debug and all(np.all(np.isfinite(t.data)) for t in inputs):
        _check_finite(op, out.data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """The nodes reachable from an output, in append (= topological) order."""

    nodes: list

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(t._node for t in node.inputs if t._node is not None and t._node.id not in seen)
        return cls(sorted(seen.values(), key=lambda n: n.id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{leaf tensor: gradient array}`` for every ``requires_grad`` leaf
    reached, and also accumulates into each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = graph if graph is not None else Graph.trace(loss)
    if loss._node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return {loss: g}

    node_grads: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = node_grads.pop(node.id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            if gi.shape != t.shape:
                gi = unbroadcast(gi, t.shape).reshape(t.shape)
            if t._node is not None:
                key = t._node.id
                node_grads[key] = node_grads[key] + gi if key in node_grads else gi
            elif t in leaf_grads:
                leaf_grads[t] = leaf_grads[t] + gi
            else:
                leaf_grads[t] = gi
    for t, gi in leaf_grads.items():
        t.grad = gi if t.grad is None else t.grad + gi
    return leaf_grads


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return make("pow", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; zero gradient where ``a <= floor``."""
    a = as_tensor(a)
    mask = a.data > floor
    return make("maximum", np.where(mask, a.data, floor).astype(a.dtype), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # stacked matmul only reaches BLAS with contiguous operands
    if a.ndim > 2 or b.ndim > 2:
        a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    return a @ b


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = _mm(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = _mm(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make("matmul", out, (a, b), bw)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over empty axes {axes} of shape {a.shape}")
    return sum_(a, axes, keepdims) * (1.0 / count)


def _extreme(a, axis, keepdims: bool, pick: Callable, op: str) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise DimensionError(f"{op} over an empty axis of shape {a.shape}")
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = pick(flat, axis=-1)  # first attaining index on ties
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if ax in axes else n for ax, n in enumerate(a.shape))
    result = out.reshape(out_shape) if keepdims else out

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], np.reshape(g, idx.shape)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return make(op, np.asarray(result), (a,), bw)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmax, "max")


def min_(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmin, "min")


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make("getitem", np.array(out, copy=True), (a,), bw)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make("concatenate", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make(
        "stack", out, tensors, lambda g: tuple(np.squeeze(s, axis) for s in np.split(g, n, axis=axis))
    )
