"""Run-level drivers shared by the CLI and the acceptance suite: training loop, evaluation, eval split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Kind, Scenario, generate_scenario
from .env.episode import Episode, PerturbConfig, stage1_context, two_stage_episodes
from .geometry import NormStats, compute_norm_stats
from .metrics import (MetricWeights, Subscores, batch_subscores, epdms, navhard_score, pdms,
                      proposal_scores, stage2_aggregate)
from .nn import AdamState, TrainingError
from .pfg import BranchCache, ProposalSet, SamplerConfig, sample_batch, select_best
from .planner import Planner, TrainConfig, epoch_order, make_batch, step_rng, train_step

SUBSCORE_KEYS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "comfort", "lk", "hc", "ec")


# ---------------------------------------------------------------- training

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # (step, total, plan, bev)

    def lines(self) -> list[str]:
        return [f"{s},{t!r},{p!r},{b!r}" for s, t, p, b in self.rows]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_epochs(model: Planner, ds, tcfg: TrainConfig, seed: int, epochs, adam: AdamState | None = None,
                 on_epoch=None, max_steps: int | None = None):
    """Train over the given epoch indices; randomness depends only on (seed, epoch, step).

    ``on_epoch(epoch, adam, log)`` runs after every epoch (checkpointing).
    Returns the optimiser state and the loss log of this call.
    """
    adam = adam if adam is not None else AdamState(lr=tcfg.lr)
    log = TrainLog()
    n, bs = len(ds), tcfg.batch_size
    for epoch in epochs:
        order = epoch_order(n, seed, epoch)
        for b in range(steps_per_epoch(n, bs)):
            if max_steps is not None and adam.step >= max_steps:
                return adam, log
            step = adam.step
            res = train_step(model, make_batch(ds, order[b * bs:(b + 1) * bs]), float(epoch), adam, tcfg,
                             step_rng(seed, step))
            log.rows.append((step, res.total, res.plan, res.bev))
        if on_epoch is not None:
            on_epoch(epoch, adam, log)
    return adam, log


def fit_stats(ds):
    # rounded to checkpoint precision so a resumed run normalises exactly like an uninterrupted one
    return NormStats.from_array(compute_norm_stats(ds.trajectory).as_array())


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------- evaluation split

KIND_CYCLE = (Kind.STRAIGHT, Kind.CURVE, Kind.INTERSECTION)


def eval_scenarios(n: int, seed: int) -> list[Scenario]:
    """Evaluation scenes: kinds cycle evenly, scenario seeds come from the split seed."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(4,)))
    seeds = rng.integers(2 ** 31 - 1, size=n)
    return [generate_scenario(int(s), KIND_CYCLE[i % 3]) for i, s in enumerate(seeds)]


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalConfig:
    n_proposals: int = 1
    sampler: SamplerConfig = SamplerConfig()
    perturb: PerturbConfig = PerturbConfig()
    sigma: float = 1.0
    chunk_rows: int = 128
    weights: MetricWeights = MetricWeights()


class ModelPlanner:
    """Batched planner over stripped contexts: sample, score proposals on the current scene, select."""

    def __init__(self, model: Planner, seed: int, cfg: EvalConfig, guided: bool | None = None,
                 keep_proposals: bool = False):
        self.model, self.seed, self.cfg, self.guided = model, seed, cfg, guided
        self.keep = keep_proposals
        self.proposals: dict[int, ProposalSet] = {}
        self.cache = BranchCache()

    def __call__(self, contexts, keys):
        P = self.cfg.n_proposals
        per_chunk = max(1, self.cfg.chunk_rows // P)
        out = []
        for lo in range(0, len(contexts), per_chunk):
            part, ks = contexts[lo:lo + per_chunk], keys[lo:lo + per_chunk]
            rasters = np.stack([c.observation.raster for c in part])
            status = np.stack([c.status.features() for c in part])
            props = sample_batch(self.model, rasters, status, P, self.seed, ks, self.cfg.sampler,
                                 guided=self.guided)
            for c, k, poses in zip(part, ks, props):
                ps = ProposalSet(int(k), poses, [(int(k), p) for p in range(P)])
                if P > 1:
                    ps.scores, ps.subscores = proposal_scores(poses, c, self.cfg.weights)
                    ps.selected = select_best(ps.scores)
                else:
                    ps.selected = 0
                if self.keep:
                    self.proposals[int(k)] = ps
                out.append(poses[ps.selected])
        return out


@dataclass
class SceneResult:
    index: int
    kind: str
    pdms: float
    epdms1: float
    epdms2: float
    navhard: float
    stage2: list
    subscores: dict


def score_episode(i: int, ep: Episode, cfg: EvalConfig) -> SceneResult:
    def subs(plan, ctx):
        both = batch_subscores(np.stack([plan, ctx.human]), ctx)
        return (Subscores(**{k: float(v[0]) for k, v in both.items()}),
                Subscores(**{k: float(v[1]) for k, v in both.items()}))

    a1, h1 = subs(ep.plan1, ep.stage1)
    e1 = epdms(a1, h1, cfg.weights)
    entries = []
    for ctx, plan in zip(ep.stage2, ep.plans2):
        a2, h2 = subs(plan, ctx)
        entries.append((epdms(a2, h2, cfg.weights), ctx.start[:2]))
    e2 = stage2_aggregate(entries, ep.endpoint, cfg.sigma)
    return SceneResult(i, ep.stage1.scenario.kind.value, pdms(a1, cfg.weights), e1, e2, navhard_score(e1, e2),
                       [float(e[0]) for e in entries], a1.as_dict())


@dataclass
class EvalResult:
    scenes: list
    episodes: list

    def means(self) -> dict:
        out = {"epdms": float(np.mean([s.navhard for s in self.scenes])),
               "epdms_stage1": float(np.mean([s.epdms1 for s in self.scenes])),
               "epdms_stage2": float(np.mean([s.epdms2 for s in self.scenes])),
               "pdms": float(np.mean([s.pdms for s in self.scenes]))}
        for k in SUBSCORE_KEYS:
            out[k] = float(np.mean([s.subscores[k] for s in self.scenes]))
        return out


def stage1_contexts(scenarios, T: int = 8, dt: float = 0.5):
    return [stage1_context(s, T, dt) for s in scenarios]


def evaluate(model: Planner, scenarios, seed: int, cfg: EvalConfig = EvalConfig(), guided: bool | None = None,
             stage1=None, keep_proposals: bool = False):
    """Two-stage evaluation of ``model`` on ``scenarios``; returns (EvalResult, planner)."""
    planner = ModelPlanner(model, seed, cfg, guided, keep_proposals)
    eps = two_stage_episodes(planner, scenarios, cfg.perturb, model.cfg.T, cfg.sampler.dt, stage1=stage1)
    return EvalResult([score_episode(i, ep, cfg) for i, ep in enumerate(eps)], eps), planner


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided exact sign test: P[X >= wins] for X ~ Bin(wins + losses, 1/2); ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def write_lines(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines))


__all__ = ["TrainLog", "train_epochs", "fit_stats", "smoothed", "eval_scenarios", "EvalConfig",
           "ModelPlanner", "SceneResult", "score_episode", "EvalResult", "evaluate", "stage1_contexts",
           "sign_test_p", "write_lines", "TrainingError", "steps_per_epoch"]
