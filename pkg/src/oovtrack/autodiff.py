"""Minimal reverse-mode automatic differentiation on numpy arrays.

Each op computes its forward value eagerly and records a closure that maps
the output gradient to input gradients (define-by-run). ``backward`` walks
the recorded graph in reverse topological order and then frees it.
Everything is float64.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from numba import njit
from scipy.special import erf


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))
    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))
    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))
    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0.0)  # propagates NaN, unlike a masked select

    def back(g):
        x._accum(g * mask)
    return _make(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        x._accum(g * (1.0 - out * out))
    return _make(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / math.sqrt(2.0)))
    out = v * cdf

    def back(g):
        pdf = np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
        x._accum(g * (cdf + v * pdf))
    return _make(out, (x,), back)


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def back(g):
        x._accum(g * np.sign(x.data))
    return _make(out, (x,), back)


# --- reductions / shape ------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))
    return _make(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def back(g):
        x._accum(g.reshape(x.shape))
    return _make(out, (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def back(g):
        x._accum(np.transpose(g, inv))
    return _make(out, (x,), back)


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        x._accum(full)
    return _make(np.array(out), (x,), back)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(np.take(g, np.arange(lo, hi), axis=ax))
    return _make(out, tensors, back)


# --- linear algebra ----------------------------------------------------------

@njit(cache=True)
def _mm_fixed_order(a, b):
    # i-k-j loop: each output element accumulates over k strictly in order,
    # so a row's result never depends on how many other rows/columns exist
    n, m = a.shape
    p = b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


_mode = threading.local()


@contextmanager
def shape_stable():
    """Matrix products inside this block use a fixed accumulation order.

    BLAS picks kernels by matrix shape, so the same row can round differently
    inside a longer or shorter sequence. Under this mode a causal network
    gives bit-identical outputs for a prefix and for the full sequence.
    """
    prev = getattr(_mode, "stable", False)
    _mode.stable = True
    try:
        yield
    finally:
        _mode.stable = prev


def _stable_matmul(a, b):
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    if b.ndim == 2:
        flat = np.ascontiguousarray(a.reshape(-1, a.shape[-1]))
        return _mm_fixed_order(flat, np.ascontiguousarray(b)).reshape(*a.shape[:-1], b.shape[-1])
    a = np.broadcast_to(a, shape + a.shape[-2:]).reshape(-1, *a.shape[-2:])
    b = np.broadcast_to(b, shape + b.shape[-2:]).reshape(-1, *b.shape[-2:])
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]))
    for i in range(a.shape[0]):
        out[i] = _mm_fixed_order(np.ascontiguousarray(a[i]), np.ascontiguousarray(b[i]))
    return out.reshape(*shape, a.shape[1], b.shape[2])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = _stable_matmul(a.data, b.data) if getattr(_mode, "stable", False) else a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch dims instead of materialising a broadcast copy
                k = a.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _make(out, (a, b), back)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    # sequential sum: trailing exact zeros (masked entries) cannot change the result
    denom = np.take(np.cumsum(e, axis=axis), [-1], axis=axis)
    out = e / denom

    def back(g):
        x._accum(out * (g - np.sum(g * out, axis=axis, keepdims=True)))
    return _make(out, (x,), back)


def layer_norm(x: Tensor, axis=-1, eps=1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        x._accum(inv * (g - gm - out * gxm))
    return _make(out, (x,), back)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding_lookup: index out of range for table {table.shape}")
    out = table.data[idx]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accum(full)
    return _make(out, (table,), back)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Causal 1-D convolution, stride 1, output length = input length.

    ``x`` is (B, L, Cin) channels-last, ``w`` is (K, Cin, Cout). Output
    ``t`` sees inputs ``t-K+1 .. t`` (zero left padding).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} and kernel {w.shape} are incompatible")
    k, cin, cout = w.shape
    bsz, length, _ = x.shape
    padded = np.concatenate([np.zeros((bsz, k - 1, cin)), x.data], axis=1)
    cols = np.concatenate([padded[:, i:i + length, :] for i in range(k)], axis=2)
    wmat = w.data.reshape(k * cin, cout)
    out = _stable_matmul(cols, wmat) if getattr(_mode, "stable", False) else cols @ wmat
    if b is not None:
        out = out + b.data

    def back(g):
        if w.requires_grad:
            w._accum((cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = g @ wmat.T
            gpad = np.zeros_like(padded)
            for i in range(k):
                gpad[:, i:i + length, :] += gcols[:, :, i * cin:(i + 1) * cin]
            x._accum(gpad[:, k - 1:, :])
    return _make(out, (x, w) if b is None else (x, w, b), back)


def maxpool1d(x: Tensor) -> Tensor:
    """Max over non-overlapping pairs along axis 1 of a (B, L, C) tensor."""
    if x.ndim != 3 or x.shape[1] % 2:
        raise ShapeMismatch(f"maxpool1d: need (B, even L, C), got {x.shape}")
    bsz, length, c = x.shape
    pairs = x.data.reshape(bsz, length // 2, 2, c)
    first = pairs[:, :, 0, :] >= pairs[:, :, 1, :]
    out = np.maximum(pairs[:, :, 0, :], pairs[:, :, 1, :])

    def back(g):
        gp = np.zeros_like(pairs)
        gp[:, :, 0, :] = np.where(first, g, 0.0)
        gp[:, :, 1, :] = np.where(first, 0.0, g)
        x._accum(gp.reshape(x.shape))
    return _make(out, (x,), back)


# --- graph traversal ---------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``; frees the graph."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        if node.grad is not None:
            node._backward(node.grad)
        # interior nodes are done once their gradient has been pushed upstream
        node._backward = None
        node._parents = ()
        node.grad = None
