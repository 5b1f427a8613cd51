"""Scene encoder, BEV head, conditioned diffusion denoiser and the training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env.world import N_CLASSES
from .geometry import NormStats, batch_kinematic_rollout, normalize_actions, to_differential
from .nn import (AdamState, F, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore,
                 Tensor, TrainingError, adam_step, clip_grad_norm, load_checkpoint, no_grad,
                 save_checkpoint)
from .schedules import (AnnealConfig, CondSourceDist, ConfigError, NoiseSchedule, anneal_alpha,
                        build_ddpm_schedule, sample_condition_source)
from .world_model import WorldModel, select_planning_condition


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    K: int = 16
    T: int = 8
    wm_layers: int = 4
    dit_layers: int = 5
    ffn_mult: int = 8
    grid: int = 64
    anchors: int = 8
    S_train: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2

    def __post_init__(self):
        if self.grid % self.anchors:
            raise ConfigError(f"grid {self.grid} is not divisible into {self.anchors} anchors per side")
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} is not divisible by {self.heads} heads")
        for name in ("d", "heads", "K", "T", "wm_layers", "dit_layers", "ffn_mult", "S_train"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def n_anchors(self) -> int:
        return self.anchors * self.anchors

    @property
    def patch(self) -> int:
        return self.grid // self.anchors

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.d


@dataclass(frozen=True)
class Switches:
    use_wm: bool = True
    use_wm_to_dit: bool = True
    use_interact: bool = True
    force_alpha_one: bool = False
    use_dspcfg: bool = True
    use_kinematic_extrap: bool = True

    def __post_init__(self):
        if self.use_wm_to_dit and not self.use_wm:
            raise ConfigError("use_wm_to_dit requires use_wm")
        if self.use_interact and not self.use_wm:
            raise ConfigError("use_interact requires use_wm")

    @property
    def conditions_dit(self) -> bool:
        return self.use_wm and self.use_wm_to_dit


@dataclass(frozen=True)
class LossWeights:
    plan: float = 10.0
    bev: float = 10.0


# ---------------------------------------------------------------- raster <-> anchor patches

def raster_to_patches(raster: np.ndarray, anchors: int) -> np.ndarray:
    """(..., H, W) -> (..., anchors^2, p*p), anchors in row-major order."""
    *lead, H, W = raster.shape
    if H != W or H % anchors:
        raise ConfigError(f"raster {H}x{W} does not split into {anchors}x{anchors} anchors")
    p = H // anchors
    x = raster.reshape(*lead, anchors, p, anchors, p)
    x = np.moveaxis(x, -3, -2)  # (..., a, a, p, p)
    return x.reshape(*lead, anchors * anchors, p * p)


def patches_to_raster(patches: np.ndarray, anchors: int) -> np.ndarray:
    """Inverse of :func:`raster_to_patches` with a trailing channel axis: (..., A, p*p, C) -> (..., H, W, C)."""
    *lead, A, pp, C = patches.shape
    p = int(round(math.sqrt(pp)))
    x = patches.reshape(*lead, anchors, anchors, p, p, C)
    x = np.moveaxis(x, -4, -3)  # (..., a, p, a, p, C)
    return x.reshape(*lead, anchors * p, anchors * p, C)


class SceneEncoder:
    """64 anchor tokens from per-(cell, class) embeddings averaged over each 8x8 patch,
    plus anchor positions, and one status token."""

    def __init__(self, store, cfg: ModelConfig, init, prefix="planner.encoder"):
        self.cfg = cfg
        pp = cfg.patch * cfg.patch
        self.embed = Linear(store, f"{prefix}.cells", pp * N_CLASSES, cfg.d, init, bias=False)
        self.pos = store.add(f"{prefix}.anchor_pos", init.table(cfg.n_anchors, cfg.d))
        self.status = Linear(store, f"{prefix}.status", 7, cfg.d, init)

    def bev_tokens(self, raster) -> Tensor:
        raster = np.asarray(raster)
        if raster.shape[-2:] != (self.cfg.grid, self.cfg.grid):
            raise ConfigError(f"raster shape {raster.shape[-2:]} does not match grid {self.cfg.grid}")
        if raster.size and raster.max() >= N_CLASSES:
            raise ValueError("raster holds an unknown class index")
        patches = raster_to_patches(raster, self.cfg.anchors)
        onehot = np.zeros(patches.shape + (N_CLASSES,), dtype=self.pos.dtype)
        np.put_along_axis(onehot, patches[..., None].astype(np.int64), 1.0, axis=-1)
        onehot = onehot.reshape(patches.shape[:-1] + (-1,))
        pooled = F.scale(self.embed(Tensor(onehot)), 1.0 / patches.shape[-1])
        return pooled + self.pos

    def __call__(self, raster, status_feats) -> Tensor:
        bev = self.bev_tokens(raster)
        st = np.asarray(status_feats, dtype=self.pos.dtype)
        tok = F.reshape(self.status(Tensor(st)), st.shape[:-1] + (1, self.cfg.d))
        return F.concat([bev, tok], axis=-2)


class BEVHead:
    """Per-anchor linear map from a BEV token to its patch of class logits."""

    def __init__(self, store, cfg: ModelConfig, init, prefix="planner.bev_head"):
        self.cfg = cfg
        self.proj = Linear(store, f"{prefix}.proj", cfg.d, cfg.patch * cfg.patch * N_CLASSES, init)

    def __call__(self, z_t: Tensor) -> Tensor:
        """Logits (..., grid, grid, 7) from the 64 BEV tokens of the scene latent."""
        A = self.cfg.n_anchors
        bev = z_t if z_t.shape[-2] == A else _first_rows(z_t, A)
        out = self.proj(bev)
        lead = out.shape[:-2]
        out = F.reshape(out, lead + (self.cfg.anchors, self.cfg.anchors, self.cfg.patch, self.cfg.patch, N_CLASSES))
        n = len(lead)
        out = F.transpose(out, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
        return F.reshape(out, lead + (self.cfg.grid, self.cfg.grid, N_CLASSES))


def _first_rows(x: Tensor, n: int) -> Tensor:
    """Leading ``n`` tokens of (..., N, d)."""
    src = x.shape

    def backward(g):
        out = np.zeros(src, dtype=g.dtype)
        out[..., :n, :] = g
        return (out,)

    return F._make(x.data[..., :n, :], (x,), backward)


class DiTBlock:
    def __init__(self, store, name, d, heads, hidden, init, with_condition: bool):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.self_attn = MultiHeadAttention(store, f"{name}.self", d, heads, init)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.scene_attn = MultiHeadAttention(store, f"{name}.scene", d, heads, init)
        self.cond_attn = None
        if with_condition:
            self.ln3 = LayerNorm(store, f"{name}.ln3", d)
            self.cond_attn = MultiHeadAttention(store, f"{name}.cond", d, heads, init, zero_out=True)
        self.ln4 = LayerNorm(store, f"{name}.ln4", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d, hidden, init)

    def __call__(self, x, scene_kv, cond_kv=None):
        x = x + self.self_attn(self.ln1(x))
        x = x + self.scene_attn(self.ln2(x), kv=scene_kv)
        if self.cond_attn is not None and cond_kv is not None:
            x = x + self.cond_attn(self.ln3(x), kv=cond_kv)
        return x + self.ffn(self.ln4(x))


class Denoiser:
    """Noise predictor over T action tokens; scene context ``[e_s || Z_t]``, condition ``Z_cond``."""

    def __init__(self, store, cfg: ModelConfig, init, with_condition: bool = True, prefix="planner.dit"):
        self.cfg = cfg
        self.inp = Linear(store, f"{prefix}.in", 4, cfg.d, init)
        self.pos = store.add(f"{prefix}.pos", init.table(cfg.T, cfg.d))
        self.step_embed = store.add(f"{prefix}.step_embed", init.table(cfg.S_train, cfg.d, std=1.0))
        self.blocks = [DiTBlock(store, f"{prefix}.block{i}", cfg.d, cfg.heads, cfg.hidden, init, with_condition)
                       for i in range(cfg.dit_layers)]
        self.ln_out = LayerNorm(store, f"{prefix}.ln_out", cfg.d)
        self.out = Linear(store, f"{prefix}.out", cfg.d, 4, init)

    @property
    def conditioned(self) -> bool:
        return self.blocks[0].cond_attn is not None

    def scene_cache(self, z_t: Tensor):
        """Per-block keys/values of the scene tokens; reusable across denoising steps."""
        return [blk.scene_attn.project_kv(z_t) for blk in self.blocks]

    def cond_cache(self, z_cond: Tensor):
        if not self.conditioned:
            return None
        return [blk.cond_attn.project_kv(z_cond) for blk in self.blocks]

    def _step_kv(self, steps, lead):
        steps = np.asarray(steps)
        e = F.take_rows(self.step_embed, steps)
        e = F.reshape(e, steps.shape + (1, self.cfg.d))
        if e.shape[:-2] != tuple(lead):
            e = F.broadcast_to(e, tuple(lead) + (1, self.cfg.d))
        return [blk.scene_attn.project_kv(e) for blk in self.blocks]

    def __call__(self, a_s, steps, z_t: Tensor | None = None, z_cond: Tensor | None = None,
                 scene_kv=None, cond_kv=None) -> Tensor:
        a_s = F.as_tensor(a_s, self.pos.dtype)
        if a_s.shape[-1] != 4:
            raise F.DimensionError(f"actions must have 4 columns, got {a_s.shape}")
        steps = np.asarray(steps)
        if steps.size and (steps.min() < 0 or steps.max() >= self.cfg.S_train):
            raise ValueError(f"diffusion step outside [0, {self.cfg.S_train})")
        if z_t is not None and z_t.shape[-1] != self.cfg.d:
            raise F.DimensionError(f"scene width {z_t.shape[-1]} differs from model width {self.cfg.d}")
        if z_cond is not None and z_cond.shape[-1] != self.cfg.d:
            raise F.DimensionError(f"condition width {z_cond.shape[-1]} differs from model width {self.cfg.d}")
        lead = a_s.shape[:-2]
        T = a_s.shape[-2]
        pos = self.pos if T == self.cfg.T else F.take_rows(self.pos, np.arange(T))
        x = self.inp(a_s) + pos
        if scene_kv is None:
            scene_kv = self.scene_cache(z_t)
        if cond_kv is None and z_cond is not None:
            cond_kv = self.cond_cache(z_cond)
        step_kv = self._step_kv(steps, lead)
        for blk, skv, ekv, ckv in zip(self.blocks, scene_kv, step_kv,
                                      cond_kv if cond_kv is not None else [None] * len(self.blocks)):
            k = F.concat([ekv[0], _bcast_lead(skv[0], ekv[0].shape[:-2])], axis=-2)
            v = F.concat([ekv[1], _bcast_lead(skv[1], ekv[1].shape[:-2])], axis=-2)
            if ckv is not None:
                ckv = (_bcast_lead(ckv[0], ekv[0].shape[:-2]), _bcast_lead(ckv[1], ekv[1].shape[:-2]))
            x = blk(x, (k, v), ckv)
        return self.out(self.ln_out(x))


def _bcast_lead(t: Tensor, lead) -> Tensor:
    lead = tuple(lead)
    if t.shape[:-2] == lead:
        return t
    return F.broadcast_to(t, lead + t.shape[-2:])


def planning_loss(eps_true, eps_pred: Tensor) -> Tensor:
    return F.mse(eps_pred, eps_true)


def bev_loss(logits: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise F.DimensionError(f"BEV logits {logits.shape[:-1]} do not match target grid {target.shape}")
    return F.softmax_cross_entropy(logits, target)


# ---------------------------------------------------------------- full model

class Planner:
    """All learnable parts in one store plus the frozen noise schedule and action statistics."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), switches: Switches = Switches(), seed: int = 0,
                 stats: NormStats = NormStats()):
        self.cfg = cfg
        self.switches = switches
        self.stats = stats
        self.store = ParamStore()
        init = Init(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,))))
        self.encoder = SceneEncoder(self.store, cfg, init)
        self.bev_head = BEVHead(self.store, cfg, init)
        self.world_model = WorldModel(self.store, init, cfg.d, cfg.K, cfg.T, cfg.heads, cfg.wm_layers,
                                      cfg.hidden) if switches.use_wm else None
        self.denoiser = Denoiser(self.store, cfg, init, with_condition=switches.conditions_dit)
        self.schedule: NoiseSchedule = build_ddpm_schedule(cfg.S_train, cfg.beta_start, cfg.beta_end)

    # -- persistence
    def state(self) -> dict:
        out = dict(self.store.state())
        out["stats.norm"] = self.stats.as_array()
        return out

    def save(self, path, adam: AdamState | None = None, extra: dict | None = None):
        tensors = self.state()
        if adam is not None:
            tensors.update(adam.to_arrays())
        for k, v in (extra or {}).items():
            tensors[k] = np.atleast_1d(np.asarray(v, dtype=np.float32))
        save_checkpoint(path, tensors)

    def load(self, path, adam: AdamState | None = None) -> dict:
        arrays = load_checkpoint(path)
        params = {k: v for k, v in arrays.items() if k.startswith(("planner.", "world_model."))}
        self.store.load_state(params)
        if "stats.norm" in arrays:
            self.stats = NormStats.from_array(arrays["stats.norm"])
        if adam is not None and "adam.step" in arrays:
            adam.load_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
        return {k: v for k, v in arrays.items() if k.startswith("meta.")}


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    clip: float = 1.0
    epochs: int = 100
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    sources: CondSourceDist = field(default_factory=CondSourceDist)
    weights: LossWeights = field(default_factory=LossWeights)
    dt: float = 0.5


@dataclass(frozen=True)
class StepResult:
    total: float
    plan: float
    bev: float
    alpha: float
    sources: np.ndarray
    steps: np.ndarray


def condition_alpha(epoch: float, tcfg: TrainConfig, switches: Switches) -> float:
    return 1.0 if switches.force_alpha_one else anneal_alpha(epoch, tcfg.anneal)


def forward_losses(model: Planner, batch: dict, epoch: float, tcfg: TrainConfig, rng: np.random.Generator):
    """Training forward pass. Returns (total, plan, bev) tensors and step metadata."""
    cfg, sw = model.cfg, model.switches
    B = len(batch["raster"])
    z_t = model.encoder(batch["raster"], batch["status"])
    sources = np.array([sample_condition_source(rng, tcfg.sources) for _ in range(B)])
    z_cond = None
    alpha = condition_alpha(epoch, tcfg, sw)
    if sw.use_wm:
        wm = model.world_model
        kin = batch_kinematic_rollout(batch["status"], tcfg.dt, cfg.T)
        e_tau = wm.intent_tokens(sources, batch["trajectory"], kin, model.stats)
        z_hat = wm.predict(z_t, e_tau)
        has = np.asarray(batch["has_future"], dtype=bool)
        if sw.use_interact and has.any():
            with no_grad():
                z_future = model.encoder.bev_tokens(batch["future"])
            wm.counters["future_reads"] += int(has.sum())
            z_ground = wm.ground(z_hat, z_future)
            z_cond = select_planning_condition(z_hat, z_ground, has, alpha)
        else:
            z_cond = z_hat
    steps = rng.integers(0, cfg.S_train, size=B)
    eps = rng.standard_normal((B, cfg.T, 4))
    a0 = normalize_actions(to_differential(batch["trajectory"]), model.stats)
    ab = model.schedule.alpha_bar[steps][:, None, None]
    a_s = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
    eps_hat = model.denoiser(a_s, steps, z_t, z_cond if sw.conditions_dit else None)
    l_plan = planning_loss(eps, eps_hat)
    l_bev = bev_loss(model.bev_head(z_t), batch["raster"])
    total = F.scale(l_plan, tcfg.weights.plan) + F.scale(l_bev, tcfg.weights.bev)
    return total, l_plan, l_bev, alpha, sources, steps


def train_step(model: Planner, batch: dict, epoch: float, adam: AdamState, tcfg: TrainConfig,
               rng: np.random.Generator) -> StepResult:
    model.store.zero_grad()
    total, l_plan, l_bev, alpha, sources, steps = forward_losses(model, batch, epoch, tcfg, rng)
    vals = (float(total.data), float(l_plan.data), float(l_bev.data))
    if not all(math.isfinite(v) for v in vals):
        raise TrainingError(f"non-finite loss at Adam step {adam.step}: total={vals[0]} "
                            f"plan={vals[1]} bev={vals[2]}")
    total.backward()
    clip_grad_norm(model.store, tcfg.clip)
    adam_step(model.store, adam)
    return StepResult(*vals, alpha, sources, steps)


def make_batch(ds, idx) -> dict:
    idx = np.asarray(idx)
    return {"raster": ds.raster[idx], "status": ds.status[idx], "trajectory": ds.trajectory[idx],
            "future": ds.future[idx], "has_future": ds.has_future[idx]}


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, epoch))).permutation(n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, step)))
