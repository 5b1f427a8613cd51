"""Guided trajectory sampling with phase-scheduled foresight branches, and proposal selection.

Rows of a sampling batch are (scene, proposal) pairs. Every row owns a
random stream derived from ``(seed, scene_id, proposal_id)``, so a row's
result does not depend on which other rows share the batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (NormStats, batch_kinematic_rollout, cumsum_decode, denormalize_actions,
                       normalize_actions, to_differential)
from .nn import F, Tensor, no_grad
from .schedules import PFGConfig, progress, w_kin, w_tw


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 20
    pfg: PFGConfig = PFGConfig()
    deterministic: bool = False
    dt: float = 0.5


def tweedie_estimate(a_s, eps_null, alpha_bar_s: float, stats: NormStats | None = None):
    """Posterior-mean clean actions and their decoded trajectory.

    ``stats`` maps the estimate from normalised diffusion space back to metres
    before decoding; without it the estimate is decoded as is.
    """
    if not alpha_bar_s > 0.0:
        raise ZeroDivisionError("Tweedie estimate is singular at alpha_bar = 0")
    a_s = np.asarray(a_s, dtype=np.float64)
    a0 = (a_s - math.sqrt(1.0 - alpha_bar_s) * np.asarray(eps_null, dtype=np.float64)) / math.sqrt(alpha_bar_s)
    raw = a0 if stats is None else denormalize_actions(a0, stats)
    return a0, cumsum_decode(raw)


def combine_guidance(branches: dict, r: float, cfg: PFGConfig):
    """``eps_null + w_kin(r) (eps_kin - eps_null) + w_tw(r) (eps_tw - eps_null)``."""
    if "null" not in branches or branches["null"] is None:
        raise GuidanceError("the unconditional branch is always required")
    e0 = branches["null"]
    wk, wt = w_kin(r, cfg), w_tw(r, cfg)
    out = e0
    if wk > 0:
        if branches.get("kin") is None:
            raise GuidanceError(f"kinematic branch required at r={r:.3f}")
        out = out + wk * (branches["kin"] - e0)
    if wt > 0:
        if branches.get("tw") is None:
            raise GuidanceError(f"self-estimate branch required at r={r:.3f}")
        out = out + wt * (branches["tw"] - e0)
    return out


class BranchCache:
    """Null and kinematic foresight latents are computed once per scene key."""

    def __init__(self):
        self._entries = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, fn):
        if key in self._entries:
            self.hits += 1
        else:
            self.misses += 1
            self._entries[key] = fn()
        return self._entries[key]


def compute_branch_latents(model, z_t: Tensor, tau_kin, tau_tw=None, want_tw: bool = False,
                           cache: BranchCache | None = None, key=None) -> dict:
    """Foresight latents of the three guidance branches for scene tokens ``z_t`` (..., N, d).

    The null and kinematic latents ignore ``tau_tw`` and are cached under ``key``.
    """
    wm = model.world_model
    if want_tw and tau_tw is None:
        raise GuidanceError("self-estimate branch requested without a trajectory")

    def static():
        with no_grad():
            z_null = wm.predict(z_t, None)
            e_kin = wm.tokenizer.from_features(_features(tau_kin, model.stats))
            z_kin = wm.predict(z_t, e_kin)
        return z_null, z_kin

    z_null, z_kin = cache.get(key, static) if cache is not None and key is not None else static()
    out = {"null": z_null, "kin": z_kin}
    if want_tw:
        out["tw"] = tw_latent(model, z_t, tau_tw)
    return out


def tw_latent(model, z_t: Tensor, tau_tw) -> Tensor:
    """Foresight latent for the per-row Tweedie trajectories (..., T, 3)."""
    wm = model.world_model
    with no_grad():
        e = wm.tokenizer.from_features(_features(tau_tw, model.stats))
        lead = e.shape[:-2]
        z = z_t if z_t.shape[:-2] == lead else F.broadcast_to(z_t, lead + z_t.shape[-2:])
        return wm.predict(z, e)


def _features(poses, stats):
    return normalize_actions(to_differential(poses), stats)


def row_streams(seed: int, scene_ids, n_proposals: int):
    """One generator per (scene, proposal) row, scene-major."""
    return [np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(s), int(p))))
            for s in scene_ids for p in range(n_proposals)]


def ancestral_update(a, eps, ab_t: float, ab_prev: float, noise=None):
    """DDPM posterior step from noise level ``ab_t`` to ``ab_prev`` using predicted noise ``eps``."""
    beta = 1.0 - ab_t / ab_prev
    x0 = (a - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0 + ct * a
    if noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


@dataclass
class SampleTrace:
    """Which guidance branches ran at each sampling step."""
    r: list = field(default_factory=list)
    kin: list = field(default_factory=list)
    tw: list = field(default_factory=list)


def _draw(streams, shape):
    return np.stack([g.standard_normal(shape) for g in streams])


def sample_batch(model, rasters, status, n_proposals: int, seed: int, scene_ids=None,
                 cfg: SamplerConfig = SamplerConfig(), guided: bool | None = None,
                 use_kin: bool | None = None, trace: SampleTrace | None = None,
                 cache: BranchCache | None = None) -> np.ndarray:
    """Proposals (B, P, T, 3) for B observations.

    ``guided`` / ``use_kin`` default to the model's ablation switches. A model
    without a world model samples its single (unconditioned) denoiser.
    """
    sw = model.switches
    guided = sw.use_dspcfg if guided is None else guided
    use_kin = sw.use_kinematic_extrap if use_kin is None else use_kin
    pfg = cfg.pfg
    if not guided or not model.denoiser.conditioned:
        pfg = PFGConfig(pfg.rho, pfg.nu, 0.0, 0.0)
    elif not use_kin:
        pfg = PFGConfig(pfg.rho, pfg.nu, 0.0, pfg.w_max_tw)
    rasters = np.asarray(rasters)
    status = np.asarray(status, dtype=np.float64)
    B = len(rasters)
    scene_ids = list(range(B)) if scene_ids is None else list(scene_ids)
    P, T = n_proposals, model.cfg.T
    if P < 1:
        raise ValueError("need at least one proposal")
    sched = model.schedule
    steps = sched.sampling_steps(cfg.n_steps)
    n = len(steps)
    streams = row_streams(seed, scene_ids, P)
    den = model.denoiser
    conditioned = den.conditioned
    with no_grad():
        z_t = model.encoder(rasters, status)                        # (B, N, d)
        z_rows = F.reshape(z_t, (B, 1) + z_t.shape[1:])
        scene_kv = den.scene_cache(z_rows)
        if conditioned:
            kin = batch_kinematic_rollout(status, cfg.dt, T)
            key = None if cache is None else tuple(scene_ids)
            lat = compute_branch_latents(model, z_t, kin, cache=cache, key=key)
            null_kv = den.cond_cache(F.reshape(lat["null"], (B, 1) + lat["null"].shape[1:]))
            kin_kv = den.cond_cache(F.reshape(lat["kin"], (B, 1) + lat["kin"].shape[1:]))
        else:
            null_kv = None
        a = _draw(streams, (T, 4)).reshape(B, P, T, 4)
        for j, s in enumerate(steps):
            r = progress(j, n)
            wk, wt = w_kin(r, pfg), w_tw(r, pfg)
            s_rows = np.full((B, P), s)
            e_null = den(a, s_rows, scene_kv=scene_kv, cond_kv=null_kv).data.astype(np.float64)
            branches = {"null": e_null}
            if wk > 0:
                branches["kin"] = den(a, s_rows, scene_kv=scene_kv, cond_kv=kin_kv).data.astype(np.float64)
            if wt > 0:
                _, tau_tw = tweedie_estimate(a, e_null, float(sched.alpha_bar[s]), model.stats)
                z_tw = tw_latent(model, z_rows, tau_tw)            # (B, P, K, d)
                branches["tw"] = den(a, s_rows, scene_kv=scene_kv,
                                     cond_kv=den.cond_cache(z_tw)).data.astype(np.float64)
            if trace is not None:
                trace.r.append(r)
                trace.kin.append("kin" in branches)
                trace.tw.append("tw" in branches)
            eps = combine_guidance(branches, r, pfg)
            ab_t = float(sched.alpha_bar[s])
            ab_prev = float(sched.alpha_bar[steps[j + 1]]) if j + 1 < n else 1.0
            last = j + 1 == n
            noise = None if (cfg.deterministic or last) else _draw(streams, (T, 4)).reshape(B, P, T, 4)
            a = ancestral_update(a, eps, ab_t, ab_prev, noise)
    return cumsum_decode(denormalize_actions(a, model.stats))


@dataclass
class ProposalSet:
    scene_id: int
    poses: np.ndarray                 # (P, T, 3)
    stream_ids: list
    scores: np.ndarray | None = None
    subscores: dict | None = None
    selected: int | None = None


def sample_proposals(model, observation, n_proposals: int = 100, seed: int = 0, scene_id: int = 0,
                     cfg: SamplerConfig = SamplerConfig(), **kw) -> ProposalSet:
    poses = sample_batch(model, observation.raster[None], observation.status.features()[None],
                         n_proposals, seed, [scene_id], cfg, **kw)[0]
    return ProposalSet(scene_id, poses, [(scene_id, p) for p in range(n_proposals)])


def select_best(scores) -> int:
    """Index of the highest score; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot select from an empty proposal set")
    return int(np.argmax(scores))


def score_and_select(props: ProposalSet, scorer) -> np.ndarray:
    """Score every proposal with ``scorer(poses) -> (scores, subscores)`` and keep the best."""
    if len(props.poses) == 0:
        raise ValueError("cannot select from an empty proposal set")
    if len(props.poses) == 1:
        props.selected = 0
    else:
        props.scores, props.subscores = scorer(props.poses)
        props.selected = select_best(props.scores)
    return props.poses[props.selected]


def proposal_log_lines(props: ProposalSet) -> list[str]:
    lines = []
    for p in range(len(props.poses)):
        sub = None if props.subscores is None else {k: float(v[p]) for k, v in props.subscores.items()}
        score = None if props.scores is None else float(props.scores[p])
        rec = {"scene_id": props.scene_id, "proposal_id": p,
               "poses": np.round(props.poses[p], 6).tolist(), "subscores": sub, "score": score,
               "selected": p == props.selected}
        lines.append(json.dumps(rec, sort_keys=True))
    return lines
