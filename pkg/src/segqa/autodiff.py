"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything in this package that needs gradients (encoders, fusion heads,
losses) is built from the handful of primitives below.  All data is kept in
float64 so that finite-difference gradient checks are meaningful and training
runs are bitwise reproducible for a fixed seed.

Design notes:
  * ``Tensor`` wraps an ndarray plus the closure that backpropagates into its
    parents.  ``backward()`` does a topological sweep.
  * Gradient recording is controlled by a module-level switch; wrap inference
    passes in ``with no_grad():`` to keep them off the graph entirely.
  * ``matmul`` supports equal leading batch dims and broadcast parameters
    (e.g. ``(B, L, d) @ (d, k)``); gradients are summed back to the original
    shapes.
  * Reductions with argmax semantics (``amax``) route the gradient to the
    first maximal element along the axis, matching the lowest-index
    tie-breaking used throughout the model.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def backward(self, seed=None):
        """Backpropagate from this tensor (a scalar unless ``seed`` given)."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that requires no grad")
        if seed is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without seed needs a scalar")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents, backprop):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backprop = backprop
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum gradient ``g`` back down to ``shape`` (inverse of broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backprop)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backprop)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backprop)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backprop(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backprop)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backprop(g):
        _accum(a, g * (a.data > 0.0))

    return _node(out_data, (a,), backprop)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), backprop)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backprop(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _node(out_data, (a,), backprop)


def take(a, idx):
    """Basic indexing / slicing; gradient is scattered back into zeros."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backprop(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(out_data, (a,), backprop)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backprop(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backprop)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            ga = np.broadcast_to(g, a.data.shape)
        elif keepdims:
            ga = np.broadcast_to(g, a.data.shape)
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
        _accum(a, ga.copy() if not ga.flags.writeable else ga)

    return _node(out_data, (a,), backprop)


def amax(a, axis):
    """Max over ``axis``; gradient goes to the first maximal entry."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis)

    def backprop(g):
        expanded = np.expand_dims(out_data, axis)
        hit = a.data == expanded
        first = np.cumsum(hit, axis=axis) == 1
        mask = hit & first
        _accum(a, mask * np.expand_dims(g, axis))

    return _node(out_data, (a,), backprop)


# -- fused neural ops -----------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _node(out_data, (a,), backprop)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backprop(g):
        d = x.data.shape[-1]
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=reduce_axes))
        _accum(bias, g.sum(axis=reduce_axes))
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, gx)
        del d

    return _node(out_data, (x, gain, bias), backprop)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` rows against integer labels.

    ``logits``: Tensor of shape (B, C) or (C,); ``labels``: int array of shape
    (B,) or a scalar int.  Returns a scalar Tensor.
    """
    logits = as_tensor(logits)
    squeeze = logits.data.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, c = z.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch {n}")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError("label index out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), y]
    out_data = losses.mean()

    def backprop(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        gz = g * p / n
        _accum(logits, gz.reshape(logits.data.shape))

    return _node(out_data, (logits,), backprop)
