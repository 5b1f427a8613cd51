import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foresight.geometry import NormStats
from foresight.nn import DimensionError, F, Init, ParamStore, Tensor, grad_check
from foresight.schedules import CondSource, CondSourceDist, sample_condition_source
from foresight.world_model import (FutureAdapter, WorldModel, ground_future_latent, predict_future_latent,
                                   select_planning_condition)


def _wm(d=16, K=4, T=4, heads=2, layers=1, seed=0, dtype=np.float64):
    store = ParamStore(dtype)
    wm = WorldModel(store, Init(np.random.default_rng(seed)), d, K, T, heads, layers, 2 * d)
    return store, wm


def _tokens(rng, *shape):
    return Tensor(rng.normal(size=shape))


# ---------------------------------------------------------------- predictor

@pytest.mark.parametrize("N,B", [(65, ()), (10, (3,)), (1, (2, 2))])
def test_predict_shape_is_k_by_d(N, B):
    rng = np.random.default_rng(0)
    _, wm = _wm()
    z = _tokens(rng, *B, N, 16)
    out = predict_future_latent(wm, z, _tokens(rng, *B, 4, 16))
    assert out.shape == tuple(B) + (4, 16)
    assert predict_future_latent(wm, z).shape == tuple(B) + (4, 16)


def test_ground_via_world_model():
    rng = np.random.default_rng(9)
    _, wm = _wm()
    zh = wm.predict(_tokens(rng, 65, 16))
    out = ground_future_latent(wm, zh, rng.normal(size=(64, 16)))
    assert out.shape == (4, 16)


def test_predict_deterministic():
    rng = np.random.default_rng(1)
    _, wm = _wm()
    z, e = _tokens(rng, 65, 16), _tokens(rng, 4, 16)
    assert np.array_equal(wm.predict(z, e).data, wm.predict(z, e).data)


def test_predict_width_mismatch():
    rng = np.random.default_rng(2)
    _, wm = _wm()
    with pytest.raises(DimensionError):
        wm.predict(_tokens(rng, 65, 16), _tokens(rng, 4, 8))


def test_null_sequence_is_default_condition():
    rng = np.random.default_rng(3)
    _, wm = _wm()
    z = _tokens(rng, 65, 16)
    assert np.array_equal(wm.predict(z).data, wm.predict(z, wm.null_tokens()).data)


def test_condition_changes_prediction():
    rng = np.random.default_rng(4)
    _, wm = _wm()
    z = _tokens(rng, 65, 16)
    assert np.abs(wm.predict(z).data - wm.predict(z, _tokens(rng, 4, 16)).data).max() > 0


def test_predictor_gradients():
    rng = np.random.default_rng(5)
    store, wm = _wm()
    z, e = _tokens(rng, 2, 9, 16), _tokens(rng, 2, 4, 16)
    tgt = rng.normal(size=(2, 4, 16))
    assert grad_check(lambda: F.mse(wm.predict(z, e), tgt), store, h=1e-3) < 1e-3


# ---------------------------------------------------------------- adapter

def _adapter(d=4, heads=1):
    store = ParamStore(np.float64)
    return store, FutureAdapter(store, "a", d, heads, Init(np.random.default_rng(0)))


def test_single_future_token_identity_projections():
    store, ad = _adapter()
    for p in ("q", "k", "v"):
        store[f"a.attn.{p}.W"].data = np.eye(4)
    tok = np.array([[1.0, -2.0, 0.5, 3.0]])
    out = ad(Tensor(np.random.default_rng(0).normal(size=(5, 4))), tok)
    assert np.allclose(out.data, np.repeat(tok, 5, axis=0), atol=1e-12)


def test_zero_value_projection_gives_zero():
    store, ad = _adapter(d=8, heads=2)
    store["a.attn.v.W"].data = np.zeros((8, 8))
    rng = np.random.default_rng(1)
    out = ad(_tokens(rng, 6, 8), rng.normal(size=(64, 8)))
    assert np.array_equal(out.data, np.zeros((6, 8)))


def test_attention_rows_sum_to_one():
    _, ad = _adapter(d=8, heads=2)
    rng = np.random.default_rng(2)
    w = ad.weights(_tokens(rng, 6, 8), rng.normal(size=(64, 8)))
    assert np.allclose(w.sum(-1), 1.0, atol=1e-6)


def test_empty_future_bank_rejected():
    _, ad = _adapter()
    with pytest.raises(DimensionError):
        ad(Tensor(np.zeros((3, 4))), np.zeros((0, 4)))


def test_adapter_output_size_independent_of_bank_size():
    _, ad = _adapter(d=8, heads=2)
    rng = np.random.default_rng(3)
    for n in (1, 16, 64, 256):
        assert ad(_tokens(rng, 16, 8), rng.normal(size=(n, 8))).shape == (16, 8)


def test_no_gradient_reaches_future_bank():
    store, ad = _adapter(d=8, heads=2)
    rng = np.random.default_rng(4)
    src = ParamStore(np.float64)
    fut = src.add("future", rng.normal(size=(10, 8)))
    zh = _tokens(rng, 4, 8)
    tgt = rng.normal(size=(4, 8))
    loss = F.mse(ad(zh, fut), tgt)
    loss.backward()
    assert fut.grad is None or not np.any(fut.grad)
    g1 = {n: t.grad.copy() for n, t in store.items()}
    # perturbing the future source changes values, but the adapter gradients still match a
    # fresh computation on the perturbed bank (no second-order path through the bank)
    fut.data = fut.data + 0.1
    store.zero_grad()
    F.mse(ad(zh, fut.data), tgt).backward()
    store2 = {n: t.grad.copy() for n, t in store.items()}
    store.zero_grad()
    F.mse(ad(zh, Tensor(fut.data)), tgt).backward()
    assert all(np.array_equal(store2[n], t.grad) for n, t in store.items())
    assert any(not np.array_equal(g1[n], store2[n]) for n in g1)


# ---------------------------------------------------------------- condition selection

def test_selection_cases():
    zh, zg = np.zeros((4, 3)), np.full((4, 3), 2.0)
    assert select_planning_condition(zh, None, False, 0.7) is zh
    assert np.array_equal(select_planning_condition(zh, zg, True, 1.0), zg)
    assert np.array_equal(select_planning_condition(zh, zg, True, 0.5), np.ones((4, 3)))
    assert np.array_equal(select_planning_condition(zh, zg, True, 0.0), zh)


def test_selection_contract_errors():
    with pytest.raises(ValueError):
        select_planning_condition(np.zeros(3), None, True, 0.5)
    with pytest.raises(ValueError):
        select_planning_condition(np.zeros(3), np.zeros(3), True, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=6), st.floats(0, 1))
def test_selection_per_row(mask, alpha):
    rng = np.random.default_rng(len(mask))
    zh, zg = rng.normal(size=(len(mask), 2, 3)), rng.normal(size=(len(mask), 2, 3))
    out = select_planning_condition(Tensor(zh), Tensor(zg), np.array(mask), alpha).data
    for i, m in enumerate(mask):
        want = alpha * zg[i] + (1 - alpha) * zh[i] if m else zh[i]
        assert np.allclose(out[i], want, atol=1e-12)


# ---------------------------------------------------------------- intent tokens and exposure

def _intents(wm, sources, rng):
    stats = NormStats()
    expert = rng.normal(size=(len(sources), 4, 3))
    kin = rng.normal(size=(len(sources), 4, 3))
    return wm.intent_tokens(np.array(sources), expert, kin, stats)


def test_null_rows_use_learned_null_sequence():
    _, wm = _wm()
    tok = _intents(wm, [CondSource.NULL, CondSource.GT, CondSource.KIN], np.random.default_rng(0))
    assert np.array_equal(tok.data[0], wm.null.data)
    assert not np.array_equal(tok.data[1], wm.null.data)


def test_expert_reads_counted_only_for_gt_rows():
    _, wm = _wm()
    _intents(wm, [CondSource.NULL, CondSource.KIN, CondSource.GT, CondSource.GT], np.random.default_rng(1))
    assert wm.counters["expert_reads"] == 2
    _intents(wm, [CondSource.NULL] * 5, np.random.default_rng(2))
    assert wm.counters["expert_reads"] == 2


def test_source_fractions_over_an_epoch():
    rng = np.random.default_rng(np.random.SeedSequence(0, spawn_key=(2, 0)))
    dist = CondSourceDist()
    draws = np.array([sample_condition_source(rng, dist) for _ in range(2000)])
    for src, p in ((CondSource.GT, 0.4), (CondSource.KIN, 0.4), (CondSource.NULL, 0.2)):
        assert abs((draws == src).mean() - p) <= 0.03
