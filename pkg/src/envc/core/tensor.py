"""Tape-based reverse-mode tensor engine.

Every differentiable op appends one record to the active :class:`Graph` in
execution order; :meth:`Graph.backward` replays the records in exact reverse
order. There is no graph optimisation and no reordering, so gradients (and
forward values) are bit-reproducible for identical inputs.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operators -------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        get_graph().backward(self, grad)


class Parameter(Tensor):
    """A leaf tensor owned by a network; ``requires_grad=False`` means frozen."""

    __slots__ = ()


class _Record:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs: tuple, out: Tensor, backward: Callable):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Graph:
    """Ordered record of executed differentiable ops."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: tuple, out: Tensor, backward: Callable) -> None:
        self.records.append(_Record(inputs, out, backward))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if not root.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if root.size != 1:
                raise RuntimeError("grad must be given for non-scalar roots")
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.dtype).reshape(root.shape)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                if t.grad is None:
                    t.grad = gi.astype(t.dtype, copy=True)
                else:
                    t.grad = t.grad + gi
        self.records.clear()

    def __enter__(self) -> Graph:
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()


def _graph_stack() -> list[Graph]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = [Graph()]
        _state.stack = stack
    return stack


def get_graph() -> Graph:
    return _graph_stack()[-1]


@contextlib.contextmanager
def no_grad():
    g = get_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


def grad_enabled() -> bool:
    return get_graph().enabled


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def make_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and record its backward if any input needs grad."""
    graph = get_graph()
    needs = graph.enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        graph.record(tuple(inputs), out, backward)
    return out


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def log2(a: Tensor) -> Tensor:
    ad = a.data
    inv_ln2 = 1.0 / np.log(2.0)
    return make_op(np.log2(ad), (a,), lambda g: (g * inv_ln2 / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.where(ad >= 0, 1 / (1 + np.exp(-np.abs(ad))), np.exp(-np.abs(ad)) / (1 + np.exp(-np.abs(ad))))
    out = out.astype(ad.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0, ad).astype(ad.dtype, copy=False)
    sig = np.exp(ad - out)
    return make_op(out, (a,), lambda g: (g * sig,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


LEAKY_SLOPE = 0.1


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Leaky ReLU; the subgradient at exactly 0 takes the negative-slope branch."""
    ad = a.data
    pos = ad > 0
    scale = np.where(pos, 1.0, slope).astype(ad.dtype)
    return make_op(ad * scale, (a,), lambda g: (g * scale,))


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """max(a, bound); below the bound the gradient still passes if it pushes upward."""
    ad = a.data
    out = np.maximum(ad, bound).astype(ad.dtype, copy=False)

    def backward(g):
        passthrough = (ad >= bound) | (g < 0)
        return (g * passthrough,)

    return make_op(out, (a,), backward)


def normal_cdf(a: Tensor) -> Tensor:
    from scipy.special import ndtr

    ad = a.data
    out = ndtr(ad).astype(ad.dtype, copy=False)
    pdf = (np.exp(-0.5 * ad * ad) / np.sqrt(2 * np.pi)).astype(ad.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * pdf,))


# --- reductions & shape ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return make_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def mse(a: Tensor, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=a.dtype)
    return make_op(out, (a, b), lambda g: (g * 2 * diff / n, -g * 2 * diff / n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_op(np.ascontiguousarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_op(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis: (K, m, n) @ (K, n, p)."""
    ad, bd = a.data, b.data
    return make_op(
        np.matmul(ad, bd),
        (a, b),
        lambda g: (np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)),
    )
