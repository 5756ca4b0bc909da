"""Dense numpy tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward`` walks the recorded graph once in reverse
topological order.  Float32 is the default precision; wrap gradient checks
in ``precision(np.float64)``.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

_state = {"dtype": np.float32, "grad_enabled": True}


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediates are not needed after their closure has run
                if node._parents:
                    node._backward = None
                    node._parents = ()

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
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward operation")
    out = Tensor(data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: _accumulate(x, g * out))


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: _accumulate(x, g * 0.5 / out))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: _accumulate(x, g * (1.0 - out * out)))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: _accumulate(x, g * pos))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner))

    return _result(out, (x,), backward)


# reductions and shape


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: _accumulate(x, np.transpose(g, inv)))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def getitem(x, idx):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _result(np.asarray(x.data[idx]), (x,), backward)


def scatter_rows(x, index, n):
    """Place the rows of ``x`` at positions ``index`` of a zero tensor with ``n`` rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    out[index] = x.data
    return _result(out, (x,), lambda g: _accumulate(x, g[index]))


def embedding(weight, ids):
    """Row gather ``weight[ids]`` for an integer array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("token id outside the embedding table")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _result(weight.data[ids], (weight,), backward)


# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def _masked_fill(x, mask):
    if mask is None:
        return x
    return np.where(mask, x, np.finfo(x.dtype).min)


def softmax(x, axis=-1, mask=None):
    """Max-stabilized softmax.  ``mask`` (broadcastable bool) keeps True entries."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = _masked_fill(x.data, mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = e * mask
    s = e.sum(axis=axis, keepdims=True)
    if np.any(s == 0):
        raise DimensionError("softmax row has no unmasked entries")
    out = e / s

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accumulate(
                x,
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
            )

    return _result(out, (x, gain, bias), backward)


def l2_normalize(x, axis=-1, min_norm=1e-12):
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= min_norm):
        raise DegenerateVectorError("cannot normalize a vector with (near) zero norm")
    out = x.data / norm

    def backward(g):
        _accumulate(x, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return _result(out, (x,), backward)


def scaled_dot_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` broadcasts against the score tensor ``[..., a, b]``; False keys are
    excluded.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key and value sequence lengths differ")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("query and key head dimensions differ")
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# gradient checking


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence, tol=1e-5, step=1e-5, seed=0):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    Non-scalar outputs are contracted with a fixed random weighting first.
    Per input the error is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``;
    inputs that do not require grad are reported as ``None``.
    """
    with precision(np.float64):
        ts = []
        for x in inputs:
            if isinstance(x, Tensor):
                ts.append(Tensor(x.data.astype(np.float64), requires_grad=x.requires_grad))
            else:
                ts.append(Tensor(np.asarray(x, dtype=np.float64)))
        probe = fn(*ts)
        w = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar():
            return float((fn(*ts).data * w).sum())

        out = fn(*ts)
        (out * w).sum().backward()
        errors = []
        for t in ts:
            if not t.requires_grad:
                errors.append(None)
                continue
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            with no_grad():
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    hi = scalar()
                    flat[i] = orig - step
                    lo = scalar()
                    flat[i] = orig
                    nflat[i] = (hi - lo) / (2 * step)
            scale = max(np.abs(numeric).max(initial=0.0), 1e-8)
            errors.append(float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    checked = [e for e in errors if e is not None]
    return {"errors": errors, "max_error": max(checked, default=0.0), "passed": all(e < tol for e in checked)}
