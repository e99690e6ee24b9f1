"""Reverse-mode automatic differentiation on numpy arrays.

A recorded computation is a DAG of Tensor nodes. Ops on tensors that
require gradients append closure-based adjoints; ``backward`` replays them
in reverse topological order. Accumulation order is fixed by recording
order, so gradients are bit-reproducible for a fixed graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "backward", "custom",
    "add", "sub", "mul", "div", "neg", "power",
    "matmul", "contract_embed", "take", "concatenate", "stack", "reshape",
    "transpose", "relu", "sigmoid", "exp", "log", "sqrt", "sin", "cos",
    "atan2", "cross", "skew", "vnorm", "sum_", "mean_", "rot_coeff_a",
    "rot_coeff_b",
]


class Tensor:
    """A node in the autodiff graph wrapping one ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make ndarray + Tensor dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd):
    """Build an output node; drop the closure when no parent tracks grads."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._backward = bwd
    return out


def custom(data, parents, bwd):
    """Register a fused op with a hand-written adjoint.

    ``bwd(grad)`` must accumulate into each parent's ``.grad`` itself
    (guarding on ``requires_grad``).
    """
    return _make(data, parents, bwd)


def _unbroadcast(grad, shape):
    """Sum ``grad`` over axes that were broadcast up from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def backward(loss):
    """Run reverse-mode accumulation from a scalar root.

    Visited nodes get fresh zero grads first, so repeated calls on the
    same graph are bitwise identical.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in visited and parent.requires_grad:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _make(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.grad -= g

    return _make(-a.data, (a,), bwd)


def power(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise TypeError("power supports scalar exponents only")
    a = as_tensor(a)
    data = a.data ** exponent

    def bwd(g):
        if a.requires_grad:
            a.grad += g * exponent * a.data ** (exponent - 1)

    return _make(data, (a,), bwd)


# -- linear algebra -----------------------------------------------------

def matmul(a, b):
    """Batched matrix product; both operands must have ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.grad += _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.grad += _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), bwd)


def contract_embed(vec, table):
    """Contract a length-x vector against a (x, N, 3) table -> (N, 3)."""
    vec, table = as_tensor(vec), as_tensor(table)
    if vec.ndim != 1 or table.ndim != 3 or vec.shape[0] != table.shape[0]:
        raise ValueError(
            f"contract_embed shape mismatch: {vec.shape} vs {table.shape}")
    data = np.tensordot(vec.data, table.data, axes=1)

    def bwd(g):
        if vec.requires_grad:
            vec.grad += np.tensordot(table.data, g, axes=([1, 2], [0, 1]))
        if table.requires_grad:
            table.grad += vec.data[:, None, None] * g[None, :, :]

    return _make(data, (vec, table), bwd)


def take(a, idx):
    """Gather along axis 0 with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _make(data, (a,), bwd)


def _getitem(a, key):
    a = as_tensor(a)
    data = a.data[key]
    fancy = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key))

    def bwd(g):
        if a.requires_grad:
            if fancy:
                np.add.at(a.grad, key, g)
            else:
                a.grad[key] += g

    return _make(data, (a,), bwd)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]

    return _make(data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.grad += np.take(g, i, axis=axis)

    return _make(data, tuple(tensors), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return _make(data, (a,), bwd)


def transpose(a, axes):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a.grad += np.transpose(g, inverse)

    return _make(data, (a,), bwd)


# -- elementwise nonlinearities ------------------------------------------

def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * (a.data > 0)

    return _make(data, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    # Split by sign to avoid overflow in exp.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        if a.requires_grad:
            a.grad += g * data * (1.0 - data)

    return _make(data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * data

    return _make(data, (a,), bwd)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a.grad += g / a.data

    return _make(data, (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.grad += g / (2.0 * data)

    return _make(data, (a,), bwd)


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.grad += g * np.cos(a.data)

    return _make(np.sin(a.data), (a,), bwd)


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.grad -= g * np.sin(a.data)

    return _make(np.cos(a.data), (a,), bwd)


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    data = np.arctan2(y.data, x.data)
    denom = x.data * x.data + y.data * y.data

    def bwd(g):
        if y.requires_grad:
            y.grad += _unbroadcast(g * x.data / denom, y.data.shape)
        if x.requires_grad:
            x.grad += _unbroadcast(-g * y.data / denom, x.data.shape)

    return _make(data, (y, x), bwd)


# -- geometry helpers -----------------------------------------------------

def cross(a, b):
    """Cross product along the last axis (must be length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.cross(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(np.cross(b.data, g), a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(np.cross(g, a.data), b.data.shape)

    return _make(data, (a, b), bwd)


def skew(r):
    """Map (..., 3) vectors to (..., 3, 3) cross-product matrices."""
    r = as_tensor(r)
    x, y, z = r.data[..., 0], r.data[..., 1], r.data[..., 2]
    zero = np.zeros_like(x)
    data = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)

    def bwd(g):
        if r.requires_grad:
            gr = np.stack([
                g[..., 2, 1] - g[..., 1, 2],
                g[..., 0, 2] - g[..., 2, 0],
                g[..., 1, 0] - g[..., 0, 1],
            ], axis=-1)
            r.grad += gr

    return _make(data, (r,), bwd)


def vnorm(a, axis=None, keepdims=False):
    """Euclidean norm with a guarded adjoint (subgradient 0 at the origin)."""
    a = as_tensor(a)
    sq = np.sum(a.data * a.data, axis=axis, keepdims=True)
    data = np.sqrt(sq)
    out_data = data if keepdims or axis is None else np.squeeze(data, axis=axis)
    if axis is None and not keepdims:
        out_data = out_data.reshape(())

    def bwd(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += g * a.data / np.maximum(data, 1e-12)

    return _make(out_data, (a,), bwd)


# -- reductions -----------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape)

    return _make(data, (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape) / count

    return _make(data, (a,), bwd)


# -- rotation coefficient functions ---------------------------------------
# a(s) = sin(sqrt(s))/sqrt(s) and b(s) = (1-cos(sqrt(s)))/s as smooth
# functions of the squared angle s. Series branch below s=1e-4 keeps both
# the value and the derivative free of 0/0 and cancellation.

_ROT_SERIES_CUTOFF = 1e-4


def rot_coeff_a(s):
    s = as_tensor(s)
    x = s.data
    small = x < _ROT_SERIES_CUTOFF
    xs = np.where(small, 1.0, x)  # keep sqrt well-defined on the dead branch
    u = np.sqrt(xs)
    data = np.where(small, 1.0 - x / 6.0 + x * x / 120.0, np.sin(u) / u)

    def bwd(g):
        if s.requires_grad:
            closed = np.cos(u) / (2.0 * xs) - np.sin(u) / (2.0 * xs * u)
            series = -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
            s.grad += g * np.where(small, series, closed)

    return _make(data, (s,), bwd)


def rot_coeff_b(s):
    s = as_tensor(s)
    x = s.data
    small = x < _ROT_SERIES_CUTOFF
    xs = np.where(small, 1.0, x)
    u = np.sqrt(xs)
    data = np.where(small, 0.5 - x / 24.0 + x * x / 720.0, (1.0 - np.cos(u)) / xs)

    def bwd(g):
        if s.requires_grad:
            closed = np.sin(u) / (2.0 * u * xs) - (1.0 - np.cos(u)) / (xs * xs)
            series = -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
            s.grad += g * np.where(small, series, closed)

    return _make(data, (s,), bwd)
