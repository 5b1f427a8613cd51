import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresight.env import Kind, Scenario, generate_scenario
from foresight.env.episode import make_context, stage1_context
from foresight.env.shapes import Polyline, box_corners, boxes_intersect, polygons_intersect_sat
from foresight.metrics import (FILTERED, PENALTY, MetricWeights, Subscores, batch_subscores, comfort_ok,
                               compute_subscores, epdms, navhard_score, pdms, proposal_scores,
                               stage2_aggregate, stage2_weights)

unit = st.floats(0.0, 1.0)
subscores = st.builds(Subscores, **{k: unit for k in ("nc", "dac", "ddc", "tlc", "ep", "ttc", "comfort",
                                                      "lk", "hc", "ec")})


def _lane_scene(agents=(), obstacles=()):
    lane = Polyline(np.stack([np.linspace(-10, 70, 81), np.zeros(81)], -1), -10.0)
    return Scenario(kind=Kind.STRAIGHT, seed=0, route=lane, roads=(lane,),
                    obstacles=np.asarray(obstacles, float).reshape(-1, 5),
                    agents=np.asarray(agents, float).reshape(-1, 7), cruise_speed=6.0)


def _ctx(scn):
    return make_context(scn, (0.0, 0.0, 0.0), 6.0, 0.0, 0.0, 0.0)


def _cruise(v=6.0, T=8, dt=0.5, lat=0.0):
    return np.stack([v * dt * np.arange(1, T + 1), np.full(T, lat), np.zeros(T)], -1)


# ---------------------------------------------------------------- aggregation hand cases

def test_pdms_all_ones_and_penalty():
    assert pdms(Subscores()) == 1.0
    assert pdms(Subscores(nc=0.0, ep=0.3)) == 0.0
    assert pdms(Subscores(dac=0.0)) == 0.0


def test_pdms_human_row():
    s = Subscores(nc=1, dac=1, ep=0.875, ttc=1, comfort=0.999)
    assert pdms(s) == pytest.approx(0.9478, abs=1e-4)
    assert pdms(s) == pytest.approx((5 * 0.875 + 5 + 2 * 0.999) / 12, abs=1e-12)


def test_epdms_cases():
    assert epdms(Subscores(), Subscores()) == 1.0
    agent = Subscores(ep=0.8, ec=0.5)
    # (5*0.8 + 5 + 2 + 2 + 2*0.5) / 16 = 14/16
    assert epdms(agent, Subscores()) == pytest.approx(0.875, abs=1e-9)
    assert epdms(Subscores(dac=0.0), Subscores(dac=0.0)) == 1.0
    assert epdms(Subscores(dac=0.0), Subscores()) == 0.0


def test_epdms_forgives_lane_keeping_but_not_progress():
    assert epdms(Subscores(lk=0.0), Subscores(lk=0.0)) == 1.0
    assert epdms(Subscores(lk=0.0), Subscores()) == pytest.approx(14 / 16, abs=1e-12)
    assert epdms(Subscores(ep=0.5), Subscores(ep=0.0)) == pytest.approx(1 - 2.5 / 16, abs=1e-12)


def test_stage2_cases():
    assert stage2_aggregate([(0.3, (1.0, 2.0))], np.zeros(2)) == pytest.approx(0.3)
    w = stage2_weights([(1.0, 0.0), (-1.0, 0.0)], np.zeros(2))
    assert np.allclose(w, [0.5, 0.5])
    s2 = stage2_aggregate([(1.0, (0.0, 0.0)), (0.0, (math.sqrt(2.0), 0.0))], np.zeros(2), sigma=1.0)
    assert s2 == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-9)


def test_stage2_errors():
    with pytest.raises(ValueError):
        stage2_aggregate([], np.zeros(2))
    with pytest.raises(ValueError):
        stage2_weights([(0.0, 0.0)], np.zeros(2), sigma=0.0)


def test_navhard_product():
    assert navhard_score(1, 1) == 1
    assert navhard_score(0, 0.7) == 0
    assert navhard_score(0.5, 0.5) == 0.25


def test_subscores_validated():
    with pytest.raises(ValueError):
        Subscores(ep=1.5)


# ---------------------------------------------------------------- aggregation properties

@settings(max_examples=200, deadline=None)
@given(subscores, subscores)
def test_scores_bounded(a, h):
    assert 0.0 <= pdms(a) <= 1.0
    assert 0.0 <= epdms(a, h) <= 1.0


@settings(max_examples=200, deadline=None)
@given(subscores, subscores, st.sampled_from(["nc", "dac", "ddc", "tlc", "ep", "ttc", "comfort", "lk", "hc",
                                              "ec"]), unit)
def test_monotone_in_every_subscore(a, h, key, bump):
    d = a.as_dict()
    d[key] = max(d[key], bump)
    better = Subscores(**d)
    assert pdms(better) >= pdms(a) - 1e-12
    assert epdms(better, h) >= epdms(a, h) - 1e-12


@settings(max_examples=100, deadline=None)
@given(subscores, st.sampled_from(PENALTY))
def test_unfiltered_penalty_zero_gives_zero(a, key):
    d = a.as_dict()
    d[key] = 0.0
    assert epdms(Subscores(**d), Subscores()) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.fixed_dictionaries({k: st.sampled_from([0.0, 1.0]) for k in FILTERED}), unit, unit, unit, unit)
def test_filtering_idempotence(binary, ep, ttc, hc, ec):
    agent = Subscores(ep=ep, ttc=ttc, hc=hc, ec=ec, comfort=hc, **binary)
    mirrored = Subscores(**binary)
    w = MetricWeights()
    forgiven = {**agent.as_dict(), **{k: 1.0 for k in FILTERED}}
    avg = (w.beta_ep * forgiven["ep"] + w.beta_ttc * forgiven["ttc"] + w.beta_lk * forgiven["lk"]
           + w.beta_hc * forgiven["hc"] + w.beta_ec * forgiven["ec"]) / 16.0
    assert epdms(agent, mirrored) == pytest.approx(avg, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(unit, st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6),
       st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 5))
def test_stage2_weights_normalised_and_convex(entries, ex, ey, sigma):
    pts = [(x, y) for _, x, y in entries]
    w = stage2_weights(pts, (ex, ey), sigma)
    assert abs(w.sum() - 1.0) <= 1e-9 and (w >= 0).all()
    s2 = stage2_aggregate([(s, (x, y)) for s, x, y in entries], (ex, ey), sigma)
    scores = [s for s, _, _ in entries]
    assert min(scores) - 1e-12 <= s2 <= max(scores) + 1e-12


# ---------------------------------------------------------------- rectangle intersection

def test_fast_intersection_agrees_with_sat_oracle_on_10k_pairs():
    rng = np.random.default_rng(0)
    n = 10_000
    a = np.c_[rng.uniform(-6, 6, (n, 2)), rng.uniform(-np.pi, np.pi, n), rng.uniform(0.5, 6, (n, 2))]
    b = np.c_[rng.uniform(-6, 6, (n, 2)), rng.uniform(-np.pi, np.pi, n), rng.uniform(0.5, 6, (n, 2))]
    fast = boxes_intersect(a, b)
    ca, cb = box_corners(*a.T), box_corners(*b.T)
    slow = np.array([polygons_intersect_sat(ca[i], cb[i]) for i in range(n)])
    assert np.array_equal(fast, slow)
    assert 0.1 < fast.mean() < 0.9


def test_touching_boxes_intersect():
    a = np.array([0.0, 0.0, 0.0, 2.0, 2.0])
    assert boxes_intersect(a, np.array([2.0, 0.0, 0.0, 2.0, 2.0]))
    assert not boxes_intersect(a, np.array([2.001, 0.0, 0.0, 2.0, 2.0]))


# ---------------------------------------------------------------- subscores on scenes

def test_expert_on_empty_straight_is_perfect():
    ctx = _ctx(_lane_scene())
    s = compute_subscores(ctx.human, ctx)
    assert (s.nc, s.dac, s.ddc, s.lk, s.ep, s.ttc, s.comfort) == (1, 1, 1, 1, 1, 1, 1)


def test_lateral_offroad_translation_fails_dac():
    ctx = _ctx(_lane_scene())
    s = compute_subscores(_cruise(lat=10.0), ctx)
    assert s.dac == 0.0 and s.lk == 0.0


def test_pose_inside_agent_fails_nc():
    ctx = _ctx(_lane_scene(agents=[[9.0, 0.0, 0.0, 0.0, 0.0, 4.0, 1.8]]))
    s = compute_subscores(_cruise(), ctx)
    assert s.nc == 0.0 and s.ttc == 0.0


def test_ttc_catches_imminent_collision_only():
    # a stopped car 4.9 m beyond the last pose: no overlap now, overlap within 1 s at 6 m/s
    ctx = _ctx(_lane_scene(agents=[[24.0 + 4.5, 0.0, 0.0, 0.0, 0.0, 4.0, 1.8]]))
    s = compute_subscores(_cruise(), ctx)
    assert s.nc == 1.0 and s.ttc == 0.0


def test_wrong_way_fails_ddc():
    ctx = _ctx(_lane_scene())
    back = _cruise()
    back[:, 0] = -back[:, 0] * 0.2
    back[:, 2] = math.pi
    s = compute_subscores(back, ctx)
    assert s.ddc == 0.0


def test_lane_keeping_threshold():
    ctx = _ctx(_lane_scene())
    assert compute_subscores(_cruise(lat=1.7), ctx).lk == 1.0
    assert compute_subscores(_cruise(lat=1.9), ctx).lk == 0.0


def test_progress_ratio():
    ctx = _ctx(_lane_scene())
    half = _cruise(v=3.0)
    assert compute_subscores(half, ctx).ep == pytest.approx(0.5, abs=1e-9)
    assert compute_subscores(_cruise(v=8.0), ctx).ep == 1.0


def test_comfort_thresholds():
    xy = _cruise()[:, :2]
    assert comfort_ok(xy, 6.0, 0.5)
    assert not comfort_ok(xy, 0.0, 0.5)           # 0 -> 6 m/s within 0.25 s
    # 6 -> 5.5 m/s: -2 m/s^2 over the first 0.25 s, then a jerk of 2 / 0.375 m/s^3
    gentle = np.cumsum(np.full(8, 5.5 * 0.5))
    assert comfort_ok(np.stack([gentle, np.zeros(8)], -1), 6.0, 0.5)
    # 6 -> 5 m/s: -4 m/s^2 is allowed but the release jerk 4 / 0.375 is not
    sharp = np.cumsum(np.full(8, 5.0 * 0.5))
    assert not comfort_ok(np.stack([sharp, np.zeros(8)], -1), 6.0, 0.5)


def test_extended_comfort_previous_plan():
    ctx = _ctx(_lane_scene())
    plan = _cruise()
    assert compute_subscores(plan, ctx, prev_plan=plan).ec == 1.0
    assert compute_subscores(plan, ctx, prev_plan=plan + [0, 0.6, 0]).ec == 0.0
    assert compute_subscores(plan, ctx).ec == 1.0


def test_tlc_always_passes():
    ctx = _ctx(_lane_scene())
    assert compute_subscores(_cruise(lat=10.0), ctx).tlc == 1.0


def test_batch_matches_single():
    ctx = stage1_context(generate_scenario(9, Kind.CURVE))
    rng = np.random.default_rng(1)
    trajs = _cruise()[None] + rng.normal(0, 1.0, (6, 8, 3)) * [1, 1, 0.1]
    batch = batch_subscores(trajs, ctx)
    for p in range(6):
        one = compute_subscores(trajs[p], ctx).as_dict()
        assert all(one[k] == batch[k][p] for k in one)


def test_proposal_scorer_ignores_reference_plan():
    ctx = stage1_context(generate_scenario(9, Kind.STRAIGHT))
    trajs = np.stack([_cruise(5.0), _cruise(6.0, lat=12.0)])
    a, _ = proposal_scores(trajs, ctx)
    b, _ = proposal_scores(trajs, ctx.public())
    assert np.array_equal(a, b)
    assert a[0] > a[1] == 0.0
