"""Parameterised building blocks registered into a shared ParamStore."""

from __future__ import annotations

import numpy as np

from . import tensor as F
from .params import Init, ParamStore
from .tensor import Tensor

LN_EPS = 1e-5


class Linear:
    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int, init: Init,
                 bias: bool = True, zero: bool = False):
        w = Init.zeros(fan_in, fan_out) if zero else init.weight(fan_in, fan_out)
        self.W = store.add(f"{name}.W", w)
        self.b = store.add(f"{name}.b", Init.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.W, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.add(f"{name}.gamma", Init.ones(d))
        self.beta = store.add(f"{name}.beta", Init.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, LN_EPS)


class MultiHeadAttention:
    """Multi-head attention with learned Q/K/V (and optional output) projections.

    ``zero_out`` zero-initialises the output projection so a freshly added
    branch contributes nothing until trained.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, init: Init,
                 bias: bool = True, out_proj: bool = True, zero_out: bool = False):
        if d % heads:
            raise F.DimensionError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", d, d, init, bias)
        self.k = Linear(store, f"{name}.k", d, d, init, bias)
        self.v = Linear(store, f"{name}.v", d, d, init, bias)
        self.o = Linear(store, f"{name}.o", d, d, init, bias, zero=zero_out) if out_proj else None

    def project_kv(self, ctx: Tensor):
        if ctx.shape[-2] == 0:
            raise F.DimensionError("attention context is empty")
        return F.split_heads(self.k(ctx), self.heads), F.split_heads(self.v(ctx), self.heads)

    def __call__(self, x: Tensor, ctx: Tensor | None = None, kv=None) -> Tensor:
        if kv is None:
            kv = self.project_kv(x if ctx is None else ctx)
        q = F.split_heads(self.q(x), self.heads)
        out = F.merge_heads(F.attention(q, kv[0], kv[1]))
        return out if self.o is None else self.o(out)

    def weights(self, x: Tensor, ctx: Tensor) -> np.ndarray:
        q = F.split_heads(self.q(x), self.heads).data
        k = F.split_heads(self.k(ctx), self.heads).data
        return F.attention_weights(q, k)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, hidden: int, init: Init):
        self.fc1 = Linear(store, f"{name}.fc1", d, hidden, init)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d, init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def multi_head_attention(Q: Tensor, K: Tensor, V: Tensor, heads: int, params: dict) -> Tensor:
    """Functional MHA: ``params`` holds ``Wq, Wk, Wv`` and optional ``Wo`` (+ biases)."""
    if K.shape[-2] == 0:
        raise F.DimensionError("attention needs a non-empty key set")
    q = F.split_heads(F.linear(Q, params["Wq"], params.get("bq")), heads)
    k = F.split_heads(F.linear(K, params["Wk"], params.get("bk")), heads)
    v = F.split_heads(F.linear(V, params["Wv"], params.get("bv")), heads)
    out = F.merge_heads(F.attention(q, k, v))
    if "Wo" in params:
        out = F.linear(out, params["Wo"], params.get("bo"))
    return out
