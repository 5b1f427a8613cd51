"""Rule-based plan scoring: subscores, PDMS, EPDMS with human filtering, two-stage aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .geometry import se2_to_world, wrap_angle
from .env.shapes import boxes_intersect
from .env.world import LANE_HALF_WIDTH, in_drivable

EGO_LENGTH, EGO_WIDTH = 4.0, 1.8
MAX_ACCEL = 4.0
MAX_JERK = 8.0
TTC_HORIZON = 1.0
TTC_SAMPLES = (0.25, 0.5, 0.75, 1.0)
EC_TOLERANCE = 0.5
MIN_EXPERT_PROGRESS = 0.5

PENALTY = ("nc", "dac", "ddc", "tlc")
FILTERED = ("nc", "dac", "ddc", "tlc", "lk")


@dataclass(frozen=True)
class Subscores:
    nc: float = 1.0
    dac: float = 1.0
    ddc: float = 1.0
    tlc: float = 1.0
    ep: float = 1.0
    ttc: float = 1.0
    comfort: float = 1.0
    lk: float = 1.0
    hc: float = 1.0
    ec: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"subscore {f.name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class MetricWeights:
    alpha_ep: float = 5.0
    alpha_ttc: float = 5.0
    alpha_c: float = 2.0
    beta_ep: float = 5.0
    beta_ttc: float = 5.0
    beta_lk: float = 2.0
    beta_hc: float = 2.0
    beta_ec: float = 2.0


def pdms(s: Subscores, w: MetricWeights = MetricWeights()) -> float:
    avg = (w.alpha_ep * s.ep + w.alpha_ttc * s.ttc + w.alpha_c * s.comfort) / (w.alpha_ep + w.alpha_ttc + w.alpha_c)
    return s.nc * s.dac * avg


def epdms(agent: Subscores, human: Subscores, w: MetricWeights = MetricWeights()) -> float:
    """Binary rule violations the human reference also commits are forgiven."""
    f = agent.as_dict()
    h = human.as_dict()
    for m in FILTERED:
        if h[m] == 0.0:
            f[m] = 1.0
    penalty = math.prod(f[m] for m in PENALTY)
    betas = {"ep": w.beta_ep, "ttc": w.beta_ttc, "lk": w.beta_lk, "hc": w.beta_hc, "ec": w.beta_ec}
    avg = sum(b * f[m] for m, b in betas.items()) / sum(betas.values())
    return penalty * avg


def stage2_weights(starts, endpoint, sigma: float = 1.0) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.float64).reshape(-1, 2)
    if len(starts) == 0:
        raise ValueError("stage-2 aggregation needs at least one entry")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d2 = ((starts - np.asarray(endpoint, dtype=np.float64)[:2]) ** 2).sum(-1)
    logw = -d2 / (2.0 * sigma * sigma)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def stage2_aggregate(entries, endpoint, sigma: float = 1.0) -> float:
    """``entries``: sequence of (score, start point); Gaussian weights on distance to ``endpoint``."""
    entries = list(entries)
    if not entries:
        raise ValueError("stage-2 aggregation needs at least one entry")
    scores = np.array([e[0] for e in entries], dtype=np.float64)
    w = stage2_weights([np.asarray(e[1])[:2] for e in entries], endpoint, sigma)
    return float(np.dot(w, scores))


def navhard_score(s1: float, s2: float) -> float:
    return s1 * s2


# ---------------------------------------------------------------- subscores

def _speeds(xy: np.ndarray, v0: float, dt: float):
    """Speed samples at t=0 and at segment midpoints, with their times."""
    T = xy.shape[-2]
    prev = np.concatenate([np.zeros_like(xy[..., :1, :]), xy[..., :-1, :]], axis=-2)
    v = np.hypot(*np.moveaxis(xy - prev, -1, 0)) / dt
    v = np.concatenate([np.full(v.shape[:-1] + (1,), v0), v], axis=-1)
    t = np.concatenate([[0.0], dt * (np.arange(T) + 0.5)])
    return v, t


def comfort_ok(xy: np.ndarray, v0: float, dt: float) -> np.ndarray:
    v, t = _speeds(xy, v0, dt)
    acc = np.diff(v, axis=-1) / np.diff(t)
    ta = 0.5 * (t[1:] + t[:-1])
    jerk = np.diff(acc, axis=-1) / np.diff(ta)
    return (np.abs(acc) <= MAX_ACCEL).all(-1) & (np.abs(jerk) <= MAX_JERK).all(-1)


def route_progress(ctx, poses_world: np.ndarray) -> np.ndarray:
    s_end = ctx.scenario.route.project(poses_world[..., -1, :2])[0]
    s_start = ctx.scenario.route.project(ctx.start[:2])[0]
    return s_end - s_start


def batch_subscores(trajs, ctx, expert=None, prev_plan=None, progress_ref: float | None = None) -> dict:
    """Subscores for plans (P, T, 3) in the frame of ``ctx.start``; returns arrays of shape (P,).

    ``progress_ref`` normalises ego progress; by default the expert's progress
    is used. Progress references below 0.5 m make EP trivially 1.
    """
    trajs = np.asarray(trajs, dtype=np.float64)
    P, T, _ = trajs.shape
    dt = ctx.dt
    scn = ctx.scenario
    world = se2_to_world(trajs, ctx.start)                      # (P, T, 3)
    times = dt * np.arange(1, T + 1)
    others = scn.boxes_at(times)                                 # (T, m, 5)
    ego = np.concatenate([world, np.broadcast_to([EGO_LENGTH, EGO_WIDTH], (P, T, 2))], axis=-1)
    if others.shape[1]:
        nc = ~boxes_intersect(ego[:, :, None, :], others[None]).any(axis=(1, 2))
    else:
        nc = np.ones(P, bool)
    dac = in_drivable(scn, world[..., :2]).all(-1)
    _, lat, tangent, _ = scn.route.project(world[..., :2])
    ddc = (np.abs(wrap_angle(world[..., 2] - tangent)) <= math.pi / 2).all(-1)
    lk = (np.abs(lat) <= LANE_HALF_WIDTH).all(-1)
    prog = route_progress(ctx, world)
    if progress_ref is None:
        exp = ctx.human if expert is None else np.asarray(expert, dtype=np.float64)
        progress_ref = float(route_progress(ctx, se2_to_world(exp, ctx.start)[None])[0])
    if progress_ref < MIN_EXPERT_PROGRESS:
        ep = np.ones(P)
    else:
        ep = np.clip(prog / progress_ref, 0.0, 1.0)
    # time to collision: constant-velocity projection of every state over the horizon
    ttc = nc.copy()
    if others.shape[1]:
        prev = np.concatenate([np.broadcast_to(ctx.start[:2], (P, 1, 2)), world[:, :-1, :2]], axis=1)
        vel = (world[..., :2] - prev) / dt                        # (P, T, 2)
        for tau in TTC_SAMPLES:
            proj = ego.copy()
            proj[..., :2] += tau * vel
            ttc &= ~boxes_intersect(proj[:, :, None, :], scn.boxes_at(times + tau)[None]).any(axis=(1, 2))
    comfort = comfort_ok(trajs[..., :2], ctx.status.vx, dt)
    if prev_plan is None:
        ec = np.ones(P, bool)
    else:
        half = T // 2
        dev = np.hypot(*np.moveaxis(trajs[:, :half, :2] - np.asarray(prev_plan)[None, :half, :2], -1, 0))
        ec = dev.mean(-1) < EC_TOLERANCE
    f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    return {"nc": f(nc), "dac": f(dac), "ddc": f(ddc), "tlc": np.ones(P), "ep": f(ep),
            "ttc": f(ttc), "comfort": f(comfort), "lk": f(lk), "hc": f(comfort), "ec": f(ec)}


def compute_subscores(traj, ctx, expert=None, prev_plan=None) -> Subscores:
    out = batch_subscores(np.asarray(traj)[None], ctx, expert, prev_plan)
    return Subscores(**{k: float(v[0]) for k, v in out.items()})


def batch_pdms(sub: dict, w: MetricWeights = MetricWeights()) -> np.ndarray:
    avg = (w.alpha_ep * sub["ep"] + w.alpha_ttc * sub["ttc"] + w.alpha_c * sub["comfort"]) \
        / (w.alpha_ep + w.alpha_ttc + w.alpha_c)
    return sub["nc"] * sub["dac"] * avg


def proposal_scores(trajs, ctx, w: MetricWeights = MetricWeights()):
    """Scorer for proposal selection: PDMS with progress relative to the furthest proposal.

    Uses only the current scene state, never the reference plan.
    """
    trajs = np.asarray(trajs, dtype=np.float64)
    world = se2_to_world(trajs, ctx.start)
    ref = float(np.max(route_progress(ctx, world)))
    sub = batch_subscores(trajs, ctx, progress_ref=ref)
    return batch_pdms(sub, w), sub
