"""Latent dynamics predictor and future alignment adapter.

The predictor maps the current scene latent and a tokenised trajectory intent
to K foresight tokens via learnable queries. During training the adapter
grounds those tokens against the (stop-gradient) encoding of the true future
frame; the planning condition is then a scheduled mix of grounded and
predicted latents.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .geometry import NormStats, TrajectoryTokenizer, token_features
from .nn import F, FeedForward, LayerNorm, MultiHeadAttention, Tensor
from .schedules import CondSource


class DecoderBlock:
    """Pre-norm residual block: self-attention, cross-attention, feed-forward."""

    def __init__(self, store, name, d, heads, hidden, init):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, heads, init)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", d, heads, init)
        self.ln3 = LayerNorm(store, f"{name}.ln3", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d, hidden, init)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln1(x))
        x = x + self.cross_attn(self.ln2(x), ctx)
        return x + self.ffn(self.ln3(x))


class FutureAdapter:
    """``MHA(LN(Z_hat), Z_future, Z_future)`` with no residual: a pure selection over future tokens."""

    def __init__(self, store, name, d, heads, init):
        self.ln = LayerNorm(store, f"{name}.ln", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads, init, bias=False, out_proj=False)

    def __call__(self, z_hat: Tensor, z_future) -> Tensor:
        z_future = F.detach(F.as_tensor(z_future, z_hat.dtype))
        if z_future.shape[-2] == 0:
            raise F.DimensionError("future token bank is empty")
        return self.attn(self.ln(z_hat), z_future)

    def weights(self, z_hat: Tensor, z_future) -> np.ndarray:
        return self.attn.weights(self.ln(z_hat), F.as_tensor(z_future, z_hat.dtype))


class WorldModel:
    """Parameters live in the shared store under the ``world_model.`` prefix."""

    def __init__(self, store, init, d: int = 64, K: int = 16, T: int = 8, heads: int = 4,
                 layers: int = 4, hidden: int | None = None, prefix: str = "world_model"):
        hidden = hidden or 8 * d
        self.d, self.K, self.T = d, K, T
        self.tokenizer = TrajectoryTokenizer(store, f"{prefix}.tokenizer", d, T, init)
        self.queries = store.add(f"{prefix}.queries", init.table(K, d))
        self.null = store.add(f"{prefix}.null", init.table(T, d))
        self.blocks = [DecoderBlock(store, f"{prefix}.block{i}", d, heads, hidden, init)
                       for i in range(layers)]
        self.adapter = FutureAdapter(store, f"{prefix}.adapter", d, heads, init)
        # instrumentation: privileged inputs consumed (expert trajectories, future frames)
        self.counters = Counter(expert_reads=0, future_reads=0)

    def null_tokens(self, batch_shape=()) -> Tensor:
        return F.broadcast_to(self.null, tuple(batch_shape) + self.null.shape)

    def predict(self, z_t: Tensor, e_tau: Tensor | None = None) -> Tensor:
        """Foresight latent (..., K, d) from scene tokens (..., N, d) and intent tokens (..., T, d)."""
        lead = z_t.shape[:-2]
        if e_tau is None:
            e_tau = self.null_tokens(lead)
        if e_tau.shape[-1] != z_t.shape[-1]:
            raise F.DimensionError(f"scene width {z_t.shape[-1]} differs from intent width {e_tau.shape[-1]}")
        ctx = F.concat([z_t, e_tau], axis=-2)
        x = F.broadcast_to(self.queries, lead + self.queries.shape)
        for blk in self.blocks:
            x = blk(x, ctx)
        return x

    def intent_tokens(self, sources, expert, kinematic, stats: NormStats) -> Tensor:
        """Per-row intent tokens: expert (GT), kinematic rollout (KIN) or learned null (NULL).

        The expert array is indexed only at GT rows, and only those count as expert reads.
        """
        sources = np.asarray(sources)
        B = len(sources)
        feats = np.zeros((B, self.T, 4))
        gt = sources == CondSource.GT
        kin = sources == CondSource.KIN
        if gt.any():
            feats[gt] = token_features(np.asarray(expert)[gt], stats)
            self.counters["expert_reads"] += int(gt.sum())
        if kin.any():
            feats[kin] = token_features(np.asarray(kinematic)[kin], stats)
        tok = self.tokenizer.from_features(feats)
        keep = (~(sources == CondSource.NULL)).astype(tok.dtype)[:, None, None]
        return tok * keep + self.null_tokens((B,)) * (1.0 - keep)

    def ground(self, z_hat: Tensor, z_future) -> Tensor:
        return self.adapter(z_hat, z_future)


def predict_future_latent(model: WorldModel, z_t: Tensor, e_tau: Tensor | None = None) -> Tensor:
    return model.predict(z_t, e_tau)


def ground_future_latent(model: WorldModel, z_hat: Tensor, z_future) -> Tensor:
    return model.ground(z_hat, z_future)


def select_planning_condition(z_hat, z_grounded, has_future, alpha: float):
    """``alpha * Z_grounded + (1 - alpha) * Z_hat`` where a future frame exists, else ``Z_hat``.

    ``has_future`` may be a flag or a per-row boolean array over the leading axis.
    Works on Tensors (keeping the graph) and on plain arrays.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mask = np.asarray(has_future, dtype=bool)
    if mask.any() and z_grounded is None:
        raise ValueError("a grounded latent is required where a future frame exists")
    if not mask.any():
        return z_hat
    is_tensor = isinstance(z_hat, Tensor)
    dtype = z_hat.dtype if is_tensor else np.result_type(np.asarray(z_hat).dtype, np.float64)
    c = (mask * alpha).astype(dtype)
    if c.ndim:
        c = c.reshape(c.shape + (1,) * (len(z_hat.shape) - c.ndim))
    if is_tensor:
        return F.mul(z_grounded, c) + F.mul(z_hat, (1.0 - c).astype(dtype))
    return c * np.asarray(z_grounded) + (1.0 - c) * np.asarray(z_hat)
