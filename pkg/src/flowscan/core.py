"""Dense float64 tensors with reverse-mode differentiation.

Every public operation returns a new :class:`Tensor`. When gradient
recording is enabled and at least one input requires a gradient, the result
keeps references to its parents and a closure mapping the output gradient to
parent gradients. :func:`backward` walks that graph in reverse topological
order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, NumericError

_GRAD_ENABLED = True
CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without building a graph (used for inverses, sampling, eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise binary

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), back, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with at least 2 dimensions")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), back, "matmul")


# elementwise unary

def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def log_abs(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(x.data))
    return _result(out, (x,), lambda g: (g / x.data,), "log_abs")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    scale = np.where(x.data >= 0, 1.0, slope)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def soft_clamp(x, bound):
    """``bound * tanh(x / bound)``: smooth clamp into (-bound, bound)."""
    return tanh(as_tensor(x) * (1.0 / bound)) * bound


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims),), "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _result(
        out, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) / count,), "mean")


def tmax(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.max(axis=axes, keepdims=True)
    hit = (x.data == out).astype(np.float64)
    hit /= hit.sum(axis=axes, keepdims=True)  # ties share the gradient
    res = out if keepdims else out.squeeze(axis=axes)
    return _result(res, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) * hit,), "max")


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise ContractError("logsumexp over an empty axis")
    m = x.data.max(axis=axes, keepdims=True)
    s = np.exp(x.data - m)
    tot = s.sum(axis=axes, keepdims=True)
    out = m + np.log(tot)
    w = s / tot
    res = out if keepdims else out.squeeze(axis=axes)
    return _result(res, (x,), lambda g: (_expand(g, x.shape, axes, keepdims) * w,), "logsumexp")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


# structural

def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


class _SliceGrad:
    """Gradient that is nonzero only on a basic-index slice of the parent.

    Accumulated in place so that T slices of one tensor cost O(T) rather
    than T dense buffers.
    """

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic(index)

    def back(g):
        if basic:
            return (_SliceGrad(index, g),)
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), back, "getitem")


def gather(x, index, axis):
    """``take_along_axis``; the backward pass scatter-adds into ``x``'s shape."""
    x = as_tensor(x)
    index = np.asarray(index)
    axis = axis % x.ndim
    out = np.take_along_axis(x.data, index, axis=axis)
    index = np.broadcast_to(index, out.shape)

    def back(g):
        full = np.zeros(x.shape)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _result(out, (x,), back, "gather")


def scatter(values, index, axis, size):
    """Adjoint of :func:`gather`: place ``values`` at ``index`` along ``axis``
    in a zero tensor whose ``axis`` has length ``size`` (duplicates add)."""
    values = as_tensor(values)
    axis = axis % values.ndim
    index = np.broadcast_to(np.asarray(index), values.shape)
    shape = list(values.shape)
    shape[axis] = size
    out = np.zeros(shape)
    grids = list(np.indices(index.shape, sparse=True))
    grids[axis] = index
    grids = tuple(grids)
    np.add.at(out, grids, values.data)
    return _result(out, (values,), lambda g: (g[grids],), "scatter")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), back, "stack")


def backward(loss, params=None):
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    ``params`` (an iterable of leaf tensors, e.g. a ``ParamStore``) receive a
    zero gradient when the loss does not depend on them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # keys whose buffer we allocated and may update in place
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            sliced = isinstance(pg, _SliceGrad)
            value = pg.value if sliced else pg
            if CHECK_FINITE and not np.isfinite(value).all():
                raise NumericError(node.op, f"non-finite gradient in backward of '{node.op}'")
            key = id(parent)
            buf = grads.get(key)
            if sliced:
                if buf is None:
                    buf = np.zeros(parent.shape)
                elif key not in owned:
                    buf = np.array(buf)
                grads[key] = buf
                owned.add(key)
                buf[pg.index] += value
            elif buf is None:
                grads[key] = value
            elif key in owned:
                buf += value
            else:
                grads[key] = buf + value
                owned.add(key)

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
