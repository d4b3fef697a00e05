"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray plus a closure that scatters an incoming
output gradient onto its parents.  Calling ``backward()`` on a scalar loss
walks the graph in reverse topological order and accumulates exact
derivatives; no numeric approximation is involved anywhere.

Only the operations the ranking scorer needs are implemented.  Softmax and
log-softmax are built compositionally with a detached max shift, which is
exact because the softmax is invariant to constant shifts.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents: tuple = (), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.value.shape), dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar")
        order = _topological_order(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(value) -> Tensor:
    """A leaf with no gradient path; convenient for labels and masks."""
    return Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Primitive operations -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.value.shape))
        b._accumulate(_unbroadcast(g, b.value.shape))

    return Tensor(a.value + b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Tensor(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Tensor(a.value / b.value, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        a._accumulate(g * exponent * a.value ** (exponent - 1.0))

    return Tensor(a.value**exponent, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.value.shape))
        b._accumulate(_unbroadcast(gb, b.value.shape))

    return Tensor(a.value @ b.value, (a, b), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_value = np.exp(a.value)

    def backward(g):
        a._accumulate(g * out_value)

    return Tensor(out_value, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g / a.value)

    return Tensor(np.log(a.value), (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g * (a.value > 0))

    return Tensor(np.maximum(a.value, 0.0), (a,), backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_value = _sigmoid_values(a.value)

    def backward(g):
        a._accumulate(g * out_value * (1.0 - out_value))

    return Tensor(out_value, (a,), backward)


def log_sigmoid(a) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    a = _as_tensor(a)
    x = a.value
    out_value = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * _sigmoid_values(-x))

    return Tensor(out_value, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.value.shape))

    return Tensor(out_value, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.value.shape))

    return Tensor(a.value.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return Tensor(a.value.transpose(axes), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), backward)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing; each output element maps to one input."""
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[key] = g
        a._accumulate(full)

    return Tensor(a.value[key], (a,), backward)


def take(a, indices) -> Tensor:
    """Fancy first-axis gather with scatter-add on the way back."""
    a = _as_tensor(a)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, indices, g)
        a._accumulate(full)

    return Tensor(a.value[indices], (a,), backward)


# Composites ------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shift = np.max(x.value, axis=axis, keepdims=True)
    e = exp(add(x, -shift))
    return div(e, tensor_sum(e, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shift = np.max(x.value, axis=axis, keepdims=True)
    s = add(x, -shift)
    return add(s, mul(log(tensor_sum(exp(s), axis=axis, keepdims=True)), -1.0))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)
