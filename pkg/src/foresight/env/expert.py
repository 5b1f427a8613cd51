"""Scripted reference driver: pure-pursuit steering plus car-following speed control.

Speed control is an intelligent-driver-model law towards the cruise speed
(capped by a lateral-acceleration limit on upcoming curvature). Agents whose
constant-velocity prediction enters the ego corridor ahead within the
yield horizon act as leaders; a crossing agent therefore makes the expert stop
short of the conflict point until it has cleared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import world_to_se2
from .shapes import boxes_intersect
from .world import Scenario, in_drivable

SUBSTEP = 0.1
A_MAX = 1.5          # comfortable acceleration
B_COMF = 2.5         # comfortable deceleration
A_BRAKE = 4.0        # hard braking limit
JERK = 6.0           # per-second change of acceleration
GAP_MIN = 2.5
HEADWAY = 1.0
LAT_ACCEL = 3.0
CORRIDOR = 2.4       # lateral half-width treated as "in the ego path"
YIELD_DIST = 10.0    # conflicts closer than this plus the stopping distance trigger yielding
PREDICT = np.arange(0.0, 3.01, 0.5)
EGO_LENGTH, EGO_WIDTH = 4.0, 1.8


@dataclass(frozen=True)
class Rollout:
    poses: np.ndarray   # (n + 1, 3) world poses at SUBSTEP spacing, start included
    speed: np.ndarray   # (n + 1,)
    accel: np.ndarray   # (n + 1,) acceleration applied over the following substep
    kappa: np.ndarray   # (n + 1,) path curvature applied over the following substep


def _route_curvature(route):
    th = np.unwrap(np.arctan2(route.seg_dir[:, 1], route.seg_dir[:, 0]))
    k = np.zeros(len(route.s))
    if len(th) > 1:
        mid = 0.5 * (route.seg_len[1:] + route.seg_len[:-1])
        k[1:-1] = np.diff(th) / mid
    return k


def _leader(scn: Scenario, s_e: float, v: float, t_rel: float):
    """Nearest predicted conflict ahead: (bumper gap, along-route speed) or None."""
    if len(scn.agents) == 0 and len(scn.obstacles) == 0:
        return None
    boxes = scn.boxes_at(t_rel + PREDICT)                      # (P, n, 5)
    vel = np.concatenate([np.zeros((len(scn.obstacles), 2)), scn.agents[:, 3:5]])
    s_a, lat, th, _ = scn.route.project(boxes[..., :2])
    ahead = s_a - s_e
    half = 0.5 * (EGO_LENGTH + boxes[..., 3])
    inside = (np.abs(lat) < CORRIDOR) & (ahead > 0.0)
    gap = ahead - half
    horizon = YIELD_DIST + v * v / (2.0 * B_COMF) + v * HEADWAY + GAP_MIN
    inside &= gap < horizon
    if not inside.any():
        return None
    gap = np.where(inside, gap, np.inf)
    p, j = np.unravel_index(np.argmin(gap), gap.shape)
    if p == 0:
        v_l = vel[j, 0] * math.cos(th[0, j]) + vel[j, 1] * math.sin(th[0, j])
    else:
        v_l = 0.0  # will enter the path later: treat the entry point as a stop line
    return float(gap[p, j]), max(float(v_l), 0.0)


def simulate_expert(scn: Scenario, start=(0.0, 0.0, 0.0), v0: float | None = None,
                    a0: float = 0.0, duration: float = 4.0, h: float = SUBSTEP) -> Rollout:
    """Closed-form-free forward simulation at step ``h``; agents move with ``scn`` time as origin."""
    n = int(round(duration / h))
    route = scn.route
    kroute = _route_curvature(route)
    x, y, th = (float(v) for v in start)
    v = scn.cruise_speed if v0 is None else float(v0)
    a = float(a0)
    poses = np.zeros((n + 1, 3))
    speed = np.zeros(n + 1)
    accel = np.zeros(n + 1)
    kappa = np.zeros(n + 1)
    for k in range(n + 1):
        poses[k] = (x, y, th)
        speed[k] = v
        s_e = float(route.project(np.array([x, y]))[0])
        look = max(4.0, 0.8 * v)
        target = route.point_at(s_e + look)[0]
        dx, dy = target[0] - x, target[1] - y
        dist = math.hypot(dx, dy)
        alpha = math.atan2(dy, dx) - th
        kap = 2.0 * math.sin(alpha) / max(dist, 1e-6)
        window = (route.s >= s_e) & (route.s <= s_e + max(10.0, 3.0 * v))
        kmax = float(np.abs(kroute[window]).max()) if window.any() else 0.0
        v_des = scn.cruise_speed if kmax < 1e-9 else min(scn.cruise_speed, math.sqrt(LAT_ACCEL / kmax))
        a_des = A_MAX * (1.0 - (v / v_des) ** 4)
        lead = _leader(scn, s_e, v, k * h)
        if lead is not None:
            gap, v_l = lead
            s_star = GAP_MIN + v * HEADWAY + v * (v - v_l) / (2.0 * math.sqrt(A_MAX * B_COMF))
            a_des -= A_MAX * (max(s_star, 0.0) / max(gap, 0.1)) ** 2
        a_des = min(max(a_des, -A_BRAKE), A_MAX)
        a = min(max(a_des, a - JERK * h), a + JERK * h)
        if v + a * h < 0.0:
            a = -v / h
        accel[k] = a
        kappa[k] = kap
        if k == n:
            break
        v_new = v + a * h
        ds = 0.5 * (v + v_new) * h
        th_mid = th + 0.5 * kap * ds
        x += ds * math.cos(th_mid)
        y += ds * math.sin(th_mid)
        th = math.atan2(math.sin(th + kap * ds), math.cos(th + kap * ds))
        v = v_new
    return Rollout(poses, speed, accel, kappa)


def sample_rollout(roll: Rollout, T: int, dt: float, h: float = SUBSTEP) -> np.ndarray:
    """World poses at t = dt, 2 dt, ..., T dt from a substep rollout."""
    stride = int(round(dt / h))
    if abs(stride * h - dt) > 1e-9:
        raise ValueError("dt must be a multiple of the expert substep")
    return roll.poses[stride: stride * T + 1: stride]


def expert_trajectory(scn: Scenario, T: int = 8, dt: float = 0.5, start=(0.0, 0.0, 0.0),
                      v0: float | None = None, a0: float = 0.0) -> np.ndarray:
    """Reference plan as (T, 3) poses in the frame of ``start``."""
    roll = simulate_expert(scn, start, v0, a0, duration=T * dt)
    return world_to_se2(sample_rollout(roll, T, dt), start)


def expert_is_safe(scn: Scenario, horizon: float = 8.0) -> bool:
    """True when the expert from the origin stays on the road and clear of all traffic."""
    roll = simulate_expert(scn, duration=horizon)
    if not in_drivable(scn, roll.poses[:, :2]).all():
        return False
    if len(scn.agents) == 0 and len(scn.obstacles) == 0:
        return True
    t = SUBSTEP * np.arange(len(roll.poses))
    others = scn.boxes_at(t)                                       # (n, m, 5)
    ego = np.concatenate([roll.poses, np.tile([EGO_LENGTH, EGO_WIDTH], (len(t), 1))], axis=-1)
    return not boxes_intersect(ego[:, None, :], others).any()
