"""Reverse-mode autodiff over numpy arrays.

Each op records its parents and a closure that maps the output gradient to
parent gradients. Fused ops (layer norm, attention, cross-entropy) carry
hand-derived backward passes.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr)


def _tracks(*ts) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad or t._backward is not None for t in ts)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _tracks(*parents):
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = a.data.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return unbroadcast(ga, a.shape), gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear expects last dim {W.shape[0]}, got {x.shape}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, src),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D ``table``; ``idx`` may have any shape."""
    idx = np.asarray(idx)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), backward)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(np.sqrt(2.0 / np.pi))
    k = xd.dtype.type(0.044715)
    x2 = xd * xd  # explicit products: float32 ``**`` falls back to a slow pow
    inner = c * (xd + k * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then affine."""
    x = as_tensor(x)
    xd = x.data
    dt = xd.dtype
    x64 = xd.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).astype(dt)
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        gx64 = gx.astype(np.float64)
        xh64 = xc * rstd
        dx = rstd * (gx64 - gx64.mean(axis=-1, keepdims=True)
                     - xh64 * (gx64 * xh64).mean(axis=-1, keepdims=True))
        return (dx.astype(dt),
                unbroadcast(g * xhat, gamma.shape),
                unbroadcast(g, beta.shape))

    return _make(out, (x, gamma, beta), backward)


def _softmax(s: np.ndarray) -> np.ndarray:
    s64 = s.astype(np.float64)
    s64 = s64 - s64.max(axis=-1, keepdims=True)
    e = np.exp(s64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(s.dtype)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (..., n, dh) operands.

    Leading dimensions broadcast, so a key/value bank shared across a batch
    axis can be passed with size 1 on that axis.
    """
    if k.shape[-2] == 0:
        raise DimensionError("attention needs at least one key")
    dh = q.shape[-1]
    sc = q.dtype.type(1.0 / np.sqrt(dh))
    qd, kd, vd = q.data, k.data, v.data
    p = _softmax((qd @ np.swapaxes(kd, -1, -2)) * sc)
    out = p @ vd

    def backward(g):
        gv = unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape)
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
        gq = unbroadcast(gs @ kd, q.shape)
        gk = unbroadcast(np.swapaxes(gs, -1, -2) @ qd, k.shape)
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmax attention matrix (no graph), for inspection and tests."""
    return _softmax((q @ np.swapaxes(k, -1, -2)) * q.dtype.type(1.0 / np.sqrt(q.shape[-1])))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    y = reshape(x, (*lead, n, heads, d // heads))
    return swapaxes(y, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    y = swapaxes(x, -2, -3)
    return reshape(y, (*lead, n, h * dh))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    val = np.asarray((diff.astype(np.float64) ** 2).sum() / n, dtype=pred.dtype)
    return _make(val, (pred,), lambda g: (g * (2.0 / n) * diff,))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` has shape (..., C); ``targets`` has the leading shape.
    """
    targets = np.asarray(targets)
    C = logits.shape[-1]
    if C < 2:
        raise DimensionError("cross-entropy needs at least two classes")
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target class outside [0, {C})")
    z = logits.data.reshape(-1, C).astype(np.float64)
    t = targets.reshape(-1)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    M = z.shape[0]
    nll = lse - z[np.arange(M), t]
    val = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(M), t] -= 1.0
        return ((p * (float(g) / M)).astype(logits.dtype).reshape(logits.shape),)

    return _make(val, (logits,), backward)
