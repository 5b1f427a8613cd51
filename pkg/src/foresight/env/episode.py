"""Planning contexts and the two-stage (perturbed restart) evaluation episode."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ..geometry import EgoStatus, se2_to_world, world_to_se2
from .expert import SUBSTEP, sample_rollout, simulate_expert
from .world import GridConfig, Scenario, advance, rasterize_bev

MAX_STATUS_ACCEL = 4.0


@dataclass(frozen=True)
class Observation:
    """Everything a planner may see: the current raster and ego status."""
    raster: np.ndarray
    status: EgoStatus


@dataclass(frozen=True)
class PlanningContext:
    scenario: Scenario      # traffic advanced to the context's start time
    start: np.ndarray       # world pose (x, y, theta) of the ego
    t0: float
    observation: Observation
    human: np.ndarray | None  # expert plan from this start, ego frame (T, 3)
    dt: float = 0.5

    @property
    def status(self) -> EgoStatus:
        return self.observation.status

    def public(self) -> "PlanningContext":
        """Copy without the reference plan: what a planner and its scorer may use."""
        return replace(self, human=None)


def initial_state(scn: Scenario):
    """Speed, acceleration and curvature the ego carries at the scene origin."""
    roll = simulate_expert(scn, duration=0.0)
    return scn.cruise_speed, 0.0, float(roll.kappa[0])


def make_context(scn: Scenario, start, speed: float, accel: float, kappa: float, t0: float,
                 T: int = 8, dt: float = 0.5, grid: GridConfig = GridConfig()) -> PlanningContext:
    start = np.asarray(start, dtype=np.float64)
    here = advance(scn, t0)
    status = EgoStatus(float(speed), 0.0, float(accel), float(speed * speed * kappa), scn.command)
    roll = simulate_expert(here, start, v0=speed, a0=accel, duration=T * dt)
    human = world_to_se2(sample_rollout(roll, T, dt), start)
    obs = Observation(rasterize_bev(here, start, grid), status)
    return PlanningContext(here, start, float(t0), obs, human, dt)


@dataclass(frozen=True)
class PerturbConfig:
    lateral: Sequence[float] = (-1.0, 0.0, 1.0)
    longitudinal: Sequence[float] = (0.0, 0.0, 0.0)
    magnitude: float = 1.0

    def __post_init__(self):
        if len(self.lateral) != len(self.longitudinal) or not self.lateral:
            raise ValueError("stage-2 offsets need matching, non-empty lateral/longitudinal lists")

    @property
    def count(self) -> int:
        return len(self.lateral)


@dataclass(frozen=True)
class Episode:
    stage1: PlanningContext
    plan1: np.ndarray
    endpoint: np.ndarray            # world pose at the end of the stage-1 plan
    stage2: list
    plans2: list


def end_state(plan: np.ndarray, dt: float, v0: float):
    """Speed, acceleration and curvature at the end of an ego-frame plan."""
    pts = np.vstack([[0.0, 0.0], plan[:, :2]])
    step = np.hypot(*np.diff(pts, axis=0).T)
    v = step / dt
    speed = float(v[-1])
    prev = float(v[-2]) if len(v) > 1 else v0
    accel = float(np.clip((speed - prev) / dt, -MAX_STATUS_ACCEL, MAX_STATUS_ACCEL))
    th = np.concatenate([[0.0], plan[:, 2]])
    dth = math.atan2(math.sin(th[-1] - th[-2]), math.cos(th[-1] - th[-2]))
    kappa = dth / step[-1] if step[-1] > 1e-3 else 0.0
    return speed, accel, float(np.clip(kappa, -0.5, 0.5))


def stage2_starts(endpoint, perturb: PerturbConfig) -> list[np.ndarray]:
    c, s = math.cos(endpoint[2]), math.sin(endpoint[2])
    out = []
    for lat, lon in zip(perturb.lateral, perturb.longitudinal):
        dx = perturb.magnitude * (lon * c - lat * s)
        dy = perturb.magnitude * (lon * s + lat * c)
        out.append(np.array([endpoint[0] + dx, endpoint[1] + dy, endpoint[2]]))
    return out


def stage1_context(scn: Scenario, T: int = 8, dt: float = 0.5, grid: GridConfig = GridConfig()) -> PlanningContext:
    if abs(round(dt / SUBSTEP) * SUBSTEP - dt) > 1e-9:
        raise ValueError("dt must be a multiple of the simulation substep")
    v0, a0, k0 = initial_state(scn)
    return make_context(scn, (0.0, 0.0, 0.0), v0, a0, k0, 0.0, T, dt, grid)


def two_stage_episodes(plan_batch: Callable, scenarios: Sequence[Scenario],
                       perturb: PerturbConfig = PerturbConfig(), T: int = 8, dt: float = 0.5,
                       grid: GridConfig = GridConfig(), stage1: Sequence[PlanningContext] | None = None
                       ) -> list[Episode]:
    """Run both stages for many scenes with one planner call per stage.

    ``plan_batch(contexts, keys)`` returns one (T, 3) plan per context; each
    context has its reference plan stripped. ``keys`` are distinct integers
    per (scene, stage-entry), usable as random-stream ids. Precomputed stage-1
    contexts may be passed in since they do not depend on the planner.
    """
    n = len(scenarios)
    per = 1 + perturb.count
    ctx1 = list(stage1) if stage1 is not None else [stage1_context(s, T, dt, grid) for s in scenarios]
    plans1 = plan_batch([c.public() for c in ctx1], [i * per for i in range(n)])
    ctx2, keys2 = [], []
    ends = []
    for i, (scn, c1, p1) in enumerate(zip(scenarios, ctx1, plans1)):
        p1 = np.asarray(p1, dtype=np.float64)
        end = se2_to_world(p1[-1], c1.start)
        ends.append(end)
        speed, accel, kappa = end_state(p1, dt, c1.status.vx)
        for k, start in enumerate(stage2_starts(end, perturb)):
            ctx2.append(make_context(scn, start, speed, accel, kappa, T * dt, T, dt, grid))
            keys2.append(i * per + 1 + k)
    plans2 = plan_batch([c.public() for c in ctx2], keys2)
    out = []
    for i in range(n):
        sl = slice(i * perturb.count, (i + 1) * perturb.count)
        out.append(Episode(ctx1[i], np.asarray(plans1[i], dtype=np.float64), ends[i], ctx2[sl],
                           [np.asarray(p, dtype=np.float64) for p in plans2[sl]]))
    return out


def two_stage_episode(planner: Callable[[Observation], np.ndarray], scn: Scenario,
                      perturb: PerturbConfig = PerturbConfig(), T: int = 8, dt: float = 0.5,
                      grid: GridConfig = GridConfig()) -> Episode:
    """Single-scene episode; ``planner`` maps an observation to an ego-frame (T, 3) plan."""
    def plan_batch(contexts, keys):
        return [planner(c.observation) for c in contexts]
    return two_stage_episodes(plan_batch, [scn], perturb, T, dt, grid)[0]
