import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresight.env.episode import stage1_context
from foresight.env.world import Kind, generate_scenario
from foresight.geometry import batch_kinematic_rollout, cumsum_decode, denormalize_actions
from foresight.harness import EvalConfig, evaluate, eval_scenarios
from foresight.metrics import proposal_scores
from foresight.nn import Tensor, no_grad
from foresight.pfg import (BranchCache, GuidanceError, ProposalSet, SamplerConfig, SampleTrace,
                           combine_guidance, compute_branch_latents, proposal_log_lines, sample_batch,
                           score_and_select, select_best, tweedie_estimate)
from foresight.planner import ModelConfig, Planner, Switches
from foresight.schedules import PFGConfig, ddpm_forward, w_kin, w_tw

SMALL = ModelConfig(d=16, heads=2, K=4, T=8, wm_layers=1, dit_layers=1, ffn_mult=2, grid=64, anchors=8)


@pytest.fixture(scope="module")
def model():
    m = Planner(SMALL, seed=0)
    # break the zero-initialised condition path so guidance branches actually differ
    rng = np.random.default_rng(0)
    for name, t in m.store.items():
        if name.startswith("planner.dit"):
            t.data = t.data + rng.normal(0, 0.05, t.data.shape).astype(t.data.dtype)
    return m


def _obs(B=2, seed=0):
    rng = np.random.default_rng(seed)
    rasters = rng.integers(0, 7, (B, 64, 64)).astype(np.uint8)
    status = np.c_[rng.uniform(3, 8, B), np.zeros(B), rng.normal(0, .5, B), rng.normal(0, .5, B),
                   np.eye(3)[rng.integers(3, size=B)]]
    return rasters, status


# ---------------------------------------------------------------- Tweedie

@pytest.mark.parametrize("ab", [0.1, 0.25, 0.5, 0.9])
def test_tweedie_error_law(ab):
    rng = np.random.default_rng(int(ab * 100))
    a0, eps, delta = rng.normal(size=(3, 8, 4))
    a_s = ddpm_forward(a0, ab, eps)
    est, _ = tweedie_estimate(a_s, eps + delta, ab)
    assert np.abs((est - a0) - (-math.sqrt((1 - ab) / ab) * delta)).max() < 1e-6


def test_tweedie_cases():
    a = np.random.default_rng(1).normal(size=(8, 4))
    est, tau = tweedie_estimate(a, np.ones_like(a), 1.0)
    assert np.array_equal(est, a)
    assert np.array_equal(tau, cumsum_decode(a))
    with pytest.raises(ZeroDivisionError):
        tweedie_estimate(a, a, 0.0)


# ---------------------------------------------------------------- combination

def test_combine_hand_case():
    cfg = PFGConfig()
    wk, wt = w_kin(0.5, cfg), w_tw(0.5, cfg)
    assert wk == pytest.approx(1.5 * math.cos(math.pi * 0.5 / 1.4), abs=1e-12)
    assert wt == pytest.approx(1.25 * (1 - math.cos(math.pi * 0.2 / 0.7)), abs=1e-12)
    out = combine_guidance({"null": 0.0, "kin": 1.0, "tw": 2.0}, 0.5, cfg)
    assert out == pytest.approx(wk + 2 * wt, abs=1e-12)
    assert out == pytest.approx(1.5921, abs=1e-4)


def test_combine_trivial_cases():
    e = np.arange(4.0)
    assert combine_guidance({"null": e}, 0.5, PFGConfig(0.7, 0.3, 0.0, 0.0)) is e
    same = {"null": e, "kin": e.copy(), "tw": e.copy()}
    assert np.array_equal(combine_guidance(same, 0.5, PFGConfig()), e)


def test_combine_missing_branch():
    with pytest.raises(GuidanceError):
        combine_guidance({"null": 0.0, "tw": 1.0}, 0.1, PFGConfig())
    with pytest.raises(GuidanceError):
        combine_guidance({"null": 0.0, "kin": 1.0}, 0.5, PFGConfig())
    with pytest.raises(GuidanceError):
        combine_guidance({"kin": 1.0}, 0.9, PFGConfig())
    assert combine_guidance({"null": 0.0, "tw": 1.0}, 0.95, PFGConfig()) > 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_combine_is_linear_in_branches(r, e0, ek, et):
    cfg = PFGConfig()
    out = combine_guidance({"null": e0, "kin": ek, "tw": et}, r, cfg)
    assert out == pytest.approx(e0 + w_kin(r, cfg) * (ek - e0) + w_tw(r, cfg) * (et - e0), abs=1e-9)


# ---------------------------------------------------------------- degeneracy oracle

def _plain_ddpm(model, rasters, status, P, seed, scene_ids, n_steps):
    """Unconditional ancestral DDPM written out step by step."""
    T = model.cfg.T
    B = len(rasters)
    gens = {(s, p): np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s, p)))
            for s in scene_ids for p in range(P)}
    order = [(s, p) for s in scene_ids for p in range(P)]
    den, sched = model.denoiser, model.schedule
    with no_grad():
        z = model.encoder(rasters, status)
        z_null = model.world_model.predict(z, None)
        scene_kv = den.scene_cache(Tensor(z.data[:, None]))
        cond_kv = den.cond_cache(Tensor(z_null.data[:, None]))
        x = np.stack([gens[k].standard_normal((T, 4)) for k in order]).reshape(B, P, T, 4)
        ts = sched.sampling_steps(n_steps)
        for j, t in enumerate(ts):
            ab = float(sched.alpha_bar[t])
            ab_prev = float(sched.alpha_bar[ts[j + 1]]) if j + 1 < len(ts) else 1.0
            eps = den(x, np.full((B, P), t), scene_kv=scene_kv, cond_kv=cond_kv).data.astype(np.float64)
            beta = 1.0 - ab / ab_prev
            x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 \
                + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x
            if j + 1 < len(ts):
                noise = np.stack([gens[k].standard_normal((T, 4)) for k in order]).reshape(B, P, T, 4)
                x = mean + math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) * noise
            else:
                x = mean
    return cumsum_decode(denormalize_actions(x, model.stats))


def test_zero_weights_match_plain_sampler(model):
    rasters, status = _obs()
    cfg = SamplerConfig(n_steps=6, pfg=PFGConfig(0.7, 0.3, 0.0, 0.0))
    got = sample_batch(model, rasters, status, 3, 11, [4, 9], cfg)
    want = _plain_ddpm(model, rasters, status, 3, 11, [4, 9], 6)
    assert np.array_equal(got, want)
    assert np.array_equal(sample_batch(model, rasters, status, 3, 11, [4, 9], SamplerConfig(n_steps=6),
                                       guided=False), want)


def test_guidance_changes_samples(model):
    rasters, status = _obs()
    a = sample_batch(model, rasters, status, 2, 0, cfg=SamplerConfig(n_steps=6), guided=True)
    b = sample_batch(model, rasters, status, 2, 0, cfg=SamplerConfig(n_steps=6), guided=False)
    assert np.abs(a - b).max() > 0


# ---------------------------------------------------------------- branches

def test_branch_activity_matches_envelopes(model):
    rasters, status = _obs(B=1)
    tr = SampleTrace()
    sample_batch(model, rasters, status, 1, 0, cfg=SamplerConfig(n_steps=20), trace=tr)
    cfg = PFGConfig()
    assert len(tr.r) == 20
    for r, k, t in zip(tr.r, tr.kin, tr.tw):
        assert k == (w_kin(r, cfg) > 0) and t == (w_tw(r, cfg) > 0)
        assert not (t and r <= cfg.nu) and not (k and r >= cfg.rho)
    assert any(tr.kin) and any(tr.tw)


def test_kin_branch_disabled_by_switch(model):
    rasters, status = _obs(B=1)
    tr = SampleTrace()
    sample_batch(model, rasters, status, 1, 0, cfg=SamplerConfig(n_steps=10), use_kin=False, trace=tr)
    assert not any(tr.kin) and any(tr.tw)


def test_model_without_world_model_samples_unguided():
    m = Planner(SMALL, Switches(use_wm=False, use_wm_to_dit=False, use_interact=False), seed=0)
    rasters, status = _obs()
    tr = SampleTrace()
    a = sample_batch(m, rasters, status, 2, 5, cfg=SamplerConfig(n_steps=6), trace=tr)
    assert not any(tr.kin) and not any(tr.tw)
    assert np.array_equal(a, sample_batch(m, rasters, status, 2, 5, cfg=SamplerConfig(n_steps=6), guided=False))


def test_branch_cache_and_null_independence(model):
    rasters, status = _obs()
    with no_grad():
        z = model.encoder(rasters, status)
    kin = batch_kinematic_rollout(status, 0.5, 8)
    cache = BranchCache()
    a = compute_branch_latents(model, z, kin, cache=cache, key=(0, 1))
    b = compute_branch_latents(model, z, kin + 1.0, cache=cache, key=(0, 1))
    assert cache.hits == 1 and cache.misses == 1
    assert a["null"] is b["null"] and a["kin"] is b["kin"]
    c = compute_branch_latents(model, z, kin + 1.0)
    assert np.array_equal(a["null"].data, c["null"].data)
    assert not np.array_equal(a["kin"].data, c["kin"].data)
    with pytest.raises(GuidanceError):
        compute_branch_latents(model, z, kin, want_tw=True)
    tw = compute_branch_latents(model, z, kin, tau_tw=kin + 2.0, want_tw=True)["tw"]
    assert np.abs(tw.data - a["null"].data).max() > 0


# ---------------------------------------------------------------- proposals

def test_seeded_determinism(model):
    rasters, status = _obs()
    a = sample_batch(model, rasters, status, 2, 5, cfg=SamplerConfig(n_steps=8))
    b = sample_batch(model, rasters, status, 2, 5, cfg=SamplerConfig(n_steps=8))
    assert a.shape == (2, 2, 8, 3) and np.array_equal(a, b)
    assert not np.array_equal(a, sample_batch(model, rasters, status, 2, 6, cfg=SamplerConfig(n_steps=8)))


def test_permuting_streams_permutes_outputs(model):
    rasters, status = _obs(B=3)
    cfg = SamplerConfig(n_steps=8)
    a = sample_batch(model, rasters, status, 2, 5, [10, 20, 30], cfg)
    perm = [2, 0, 1]
    b = sample_batch(model, rasters[perm], status[perm], 2, 5, [30, 10, 20], cfg)
    assert np.array_equal(a[perm], b)


def test_rows_do_not_couple(model):
    rasters, status = _obs(B=2)
    cfg = SamplerConfig(n_steps=8)
    both = sample_batch(model, rasters, status, 4, 5, [0, 1], cfg)
    alone = sample_batch(model, rasters[1:], status[1:], 2, 5, [1], cfg)
    assert np.allclose(both[1, :2], alone[0], atol=1e-9)


def test_select_best_rules():
    assert select_best([0.2, 0.9, 0.9]) == 1
    assert select_best([0.5]) == 0
    with pytest.raises(ValueError):
        select_best([])
    poses = np.zeros((1, 8, 3))
    ps = ProposalSet(0, poses, [(0, 0)])
    assert np.array_equal(score_and_select(ps, lambda p: 1 / 0), poses[0]) and ps.selected == 0
    with pytest.raises(ValueError):
        score_and_select(ProposalSet(0, np.zeros((0, 8, 3)), []), None)


def test_on_road_proposal_beats_off_road():
    ctx = stage1_context(generate_scenario(9, Kind.STRAIGHT)).public()
    on = stage1_context(generate_scenario(9, Kind.STRAIGHT)).human
    off = on.copy()
    off[:, 1] += np.linspace(3, 25, 8)
    scores, sub = proposal_scores(np.stack([off, on]), ctx)
    assert sub["dac"].tolist() == [0.0, 1.0]
    ps = ProposalSet(0, np.stack([off, on]), [(0, 0), (0, 1)])
    assert np.array_equal(score_and_select(ps, lambda p: proposal_scores(p, ctx)), on)
    lines = proposal_log_lines(ps)
    assert [l.count('"selected": true') for l in lines] == [0, 1]


def test_evaluation_never_reads_expert_or_future():
    m = Planner(SMALL, seed=1)
    res, planner = evaluate(m, eval_scenarios(2, 0), 0, EvalConfig(n_proposals=2, sampler=SamplerConfig(n_steps=4)),
                            keep_proposals=True)
    assert m.world_model.counters["expert_reads"] == 0
    assert m.world_model.counters["future_reads"] == 0
    assert len(res.scenes) == 2
    assert all(ps.poses.shape == (2, 8, 3) and ps.selected is not None for ps in planner.proposals.values())
