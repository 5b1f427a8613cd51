"""Scalar schedules: DDPM noise levels, guidance envelopes, condition annealing,
and the three-way conditioning-source draw."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray  # alpha_bar[s] = prod_{i <= s} (1 - beta[i]); clean data sits at 1.0

    @property
    def steps(self) -> int:
        return len(self.beta)

    def sampling_steps(self, n: int) -> np.ndarray:
        """``n`` uniformly strided training indices, highest noise first."""
        if not 1 <= n <= self.steps:
            raise ConfigError(f"sampling steps must be in [1, {self.steps}]")
        return np.unique(np.round(np.linspace(0, self.steps - 1, n)).astype(int))[::-1]


def build_ddpm_schedule(S: int, beta_1: float, beta_S: float) -> NoiseSchedule:
    """Linear beta ramp; cumulative products in float64."""
    if S < 1 or not (0.0 <= beta_1 <= beta_S <= 1.0):
        raise ConfigError(f"invalid DDPM schedule S={S}, beta=({beta_1}, {beta_S})")
    beta = np.linspace(beta_1, beta_S, S, dtype=np.float64)
    return NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))


def ddpm_forward(a0, alpha_bar_s: float, eps):
    a0 = np.asarray(a0)
    return math.sqrt(alpha_bar_s) * a0 + math.sqrt(1.0 - alpha_bar_s) * np.asarray(eps)


@dataclass(frozen=True)
class PFGConfig:
    rho: float = 0.7
    nu: float = 0.3
    w_max_kin: float = 1.5
    w_max_tw: float = 2.5

    def __post_init__(self):
        if not (0.0 < self.rho <= 1.0 and 0.0 <= self.nu < 1.0):
            raise ConfigError("guidance phases need rho in (0, 1] and nu in [0, 1)")
        if not self.nu < self.rho:
            raise ConfigError(f"nu ({self.nu}) must be below rho ({self.rho})")
        if self.w_max_kin < 0 or self.w_max_tw < 0:
            raise ConfigError("guidance strengths must be non-negative")


def w_kin(r: float, cfg: PFGConfig) -> float:
    """Kinematic-branch weight: cosine decay that reaches 0 at r = rho."""
    if r < cfg.rho:
        return cfg.w_max_kin * math.cos(math.pi * r / (2.0 * cfg.rho))
    return 0.0


def w_tw(r: float, cfg: PFGConfig) -> float:
    """Self-estimate branch weight: raised-cosine rise from r = nu to w_max at r = 1."""
    if r > cfg.nu:
        return 0.5 * cfg.w_max_tw * (1.0 - math.cos(math.pi * (r - cfg.nu) / (1.0 - cfg.nu)))
    return 0.0


def progress(step_index: int, n_steps: int) -> float:
    """0 at the first (noisiest) sampling step, 1 at the last."""
    return 0.0 if n_steps <= 1 else step_index / (n_steps - 1)


@dataclass(frozen=True)
class AnnealConfig:
    E: int = 100
    rho_E: float = 0.83
    beta_slope: float | None = None  # default: sigmoid spans ~10% of training

    @property
    def e0(self) -> float:
        return self.rho_E * self.E

    @property
    def slope(self) -> float:
        return self.beta_slope if self.beta_slope is not None else 10.0 / (0.1 * self.E)


def anneal_alpha(e: float, cfg: AnnealConfig) -> float:
    """Weight on the grounded condition: 1 - sigmoid(slope * (e - e0))."""
    z = cfg.slope * (e - cfg.e0)
    if z >= 0:
        return math.exp(-z) / (1.0 + math.exp(-z))
    return 1.0 / (1.0 + math.exp(z))


class CondSource(IntEnum):
    GT = 0
    KIN = 1
    NULL = 2


@dataclass(frozen=True)
class CondSourceDist:
    p_gt: float = 0.4
    p_kin: float = 0.4
    p_null: float = 0.2

    def __post_init__(self):
        ps = (self.p_gt, self.p_kin, self.p_null)
        if min(ps) < 0 or abs(sum(ps) - 1.0) > 1e-9:
            raise ConfigError(f"conditioning-source probabilities must be >= 0 and sum to 1: {ps}")


def sample_condition_source(rng: np.random.Generator, dist: CondSourceDist) -> CondSource:
    u = rng.random()
    if u < dist.p_gt:
        return CondSource.GT
    if u < dist.p_gt + dist.p_kin:
        return CondSource.KIN
    return CondSource.NULL
