"""Trajectory representations: differential actions, decoding, kinematic rollout."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .nn import F, LayerNorm, Linear

SIGMA_FLOOR = 1e-3


class Command(IntEnum):
    KEEP_LANE = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


@dataclass(frozen=True)
class EgoStatus:
    vx: float
    vy: float
    ax: float = 0.0
    ay: float = 0.0
    command: Command = Command.KEEP_LANE

    def features(self) -> np.ndarray:
        onehot = np.zeros(3)
        onehot[int(self.command)] = 1.0
        return np.concatenate([[self.vx, self.vy, self.ax, self.ay], onehot])


@dataclass(frozen=True)
class NormStats:
    mu_x: float = 0.0
    mu_y: float = 0.0
    sigma_x: float = 1.0
    sigma_y: float = 1.0

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("normalisation std must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y, self.sigma_x, self.sigma_y], dtype=np.float32)

    @classmethod
    def from_array(cls, a) -> "NormStats":
        return cls(*(float(v) for v in np.asarray(a).reshape(4)))


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def to_differential(poses) -> np.ndarray:
    """(..., T, 3) absolute poses -> (..., T, 4) rows (dx, dy, sin, cos), origin at 0."""
    poses = np.asarray(poses, dtype=np.float64)
    xy = poses[..., :2]
    prev = np.concatenate([np.zeros_like(xy[..., :1, :]), xy[..., :-1, :]], axis=-2)
    d = xy - prev
    th = poses[..., 2]
    return np.stack([d[..., 0], d[..., 1], np.sin(th), np.cos(th)], axis=-1)


def cumsum_decode(actions) -> np.ndarray:
    """Inverse of :func:`to_differential`; headings come from atan2 of the sin/cos columns."""
    a = np.asarray(actions, dtype=np.float64)
    xy = np.cumsum(a[..., :2], axis=-2)
    th = np.arctan2(a[..., 2], a[..., 3])  # atan2(0, 0) is 0 in numpy
    return np.concatenate([xy, th[..., None]], axis=-1)


def normalize_actions(actions, stats: NormStats) -> np.ndarray:
    a = np.array(actions, dtype=np.float64)
    a[..., 0] = (a[..., 0] - stats.mu_x) / stats.sigma_x
    a[..., 1] = (a[..., 1] - stats.mu_y) / stats.sigma_y
    return a


def denormalize_actions(actions, stats: NormStats) -> np.ndarray:
    a = np.array(actions, dtype=np.float64)
    a[..., 0] = a[..., 0] * stats.sigma_x + stats.mu_x
    a[..., 1] = a[..., 1] * stats.sigma_y + stats.mu_y
    return a


def token_features(poses, stats: NormStats) -> np.ndarray:
    """Per-step tokenizer input: normalised (dx, dy) and raw (sin, cos) of heading."""
    return normalize_actions(to_differential(poses), stats)


def kinematic_rollout(status: EgoStatus, dt: float = 0.5, T: int = 8) -> np.ndarray:
    """Constant-acceleration extrapolation of the ego state, shape (T, 3).

    A step with zero velocity and acceleration keeps the previous heading.
    """
    if T < 1 or dt <= 0:
        raise ValueError("kinematic_rollout needs T >= 1 and dt > 0")
    t = dt * np.arange(1, T + 1)
    x = status.vx * t + 0.5 * status.ax * t * t
    y = status.vy * t + 0.5 * status.ay * t * t
    hx = status.vx + status.ax * t
    hy = status.vy + status.ay * t
    th = np.zeros(T)
    prev = 0.0
    for k in range(T):
        if hx[k] == 0.0 and hy[k] == 0.0:
            th[k] = prev
        else:
            th[k] = np.arctan2(hy[k], hx[k])
        prev = th[k]
    return np.stack([x, y, th], axis=-1)


def batch_kinematic_rollout(status_feats: np.ndarray, dt: float, T: int) -> np.ndarray:
    """Vectorised rollout from (B, 7) status features (vx, vy, ax, ay, command one-hot)."""
    return np.stack([kinematic_rollout(EgoStatus(*f[:4]), dt, T) for f in status_feats])


def compute_norm_stats(trajectories) -> NormStats:
    trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
    if not trajs:
        raise ValueError("cannot compute normalisation statistics of an empty dataset")
    d = np.concatenate([to_differential(t)[..., :2].reshape(-1, 2) for t in trajs])
    mu = d.mean(axis=0)
    sd = np.maximum(d.std(axis=0), SIGMA_FLOOR)
    return NormStats(float(mu[0]), float(mu[1]), float(sd[0]), float(sd[1]))


def se2_to_world(poses, origin) -> np.ndarray:
    """Map ego-frame poses (..., 3) into the frame where the ego sits at ``origin``."""
    poses = np.asarray(poses, dtype=np.float64)
    ox, oy, oth = origin
    c, s = np.cos(oth), np.sin(oth)
    x = ox + c * poses[..., 0] - s * poses[..., 1]
    y = oy + s * poses[..., 0] + c * poses[..., 1]
    return np.stack([x, y, wrap_angle(poses[..., 2] + oth)], axis=-1)


def world_to_se2(poses, origin) -> np.ndarray:
    poses = np.asarray(poses, dtype=np.float64)
    ox, oy, oth = origin
    c, s = np.cos(oth), np.sin(oth)
    dx = poses[..., 0] - ox
    dy = poses[..., 1] - oy
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(poses[..., 2] - oth)], axis=-1)


def points_to_frame(xy, origin) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    ox, oy, oth = origin
    c, s = np.cos(oth), np.sin(oth)
    dx = xy[..., 0] - ox
    dy = xy[..., 1] - oy
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


class TrajectoryTokenizer:
    """Trajectory -> T tokens: ``LN(W [dx_n, dy_n, sin, cos] + p_k)``."""

    def __init__(self, store, name: str, d: int, T: int, init):
        self.T = T
        self.proj = Linear(store, f"{name}.proj", 4, d, init, bias=False)
        self.pos = store.add(f"{name}.pos", init.table(T, d))
        self.ln = LayerNorm(store, f"{name}.ln", d)

    def from_features(self, feats):
        feats = np.asarray(feats)
        if feats.shape[-2] > self.T:
            raise ValueError(f"trajectory has {feats.shape[-2]} steps, positional table holds {self.T}")
        T = feats.shape[-2]
        x = F.Tensor(feats.astype(self.pos.dtype))
        pos = self.pos if T == self.T else F.take_rows(self.pos, np.arange(T))
        return self.ln(self.proj(x) + pos)


def tokenize_trajectory(poses, stats: NormStats, tokenizer: TrajectoryTokenizer):
    return tokenizer.from_features(token_features(poses, stats))
