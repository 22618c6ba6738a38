import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_stream, small_config
from oracles import full_recompute_influence
from visipruner.engine import LayerPlan, ModelConfig, init_model, prefill, run_layer
from visipruner.fixtures import build_fixture
from visipruner.kernels import MacCounter
from visipruner.pruner import (
    CausalityError,
    InfluenceRecord,
    PruneParams,
    ScheduleError,
    apply_schedule,
    block_row_mass,
    check_schedule_order,
    detect_exit_layer,
    detect_filtering_layer,
    evict_vision_kv,
    influence_from_row,
    influence_of_token,
    layer_influences,
    merge_vision_attention,
    probe_layer_influences,
    select_baseline,
    select_retained,
)


def rec(token, cos=1.0, l2=0.0, layer=2):
    return InfluenceRecord(layer, token, cos, l2, 0.0)


# -- merge -------------------------------------------------------------------


def test_merge_example():
    out = merge_vision_attention([0.2, 0.3, 0.5], [0, 1], 0)
    assert out.tolist() == [0.5, 0.0, 0.5]


def test_merge_zero_vision_mass_unchanged():
    row = np.array([0.0, 0.0, 0.25, 0.75])
    assert np.array_equal(merge_vision_attention(row, [0, 1], 1), row)


def test_merge_target_outside_range():
    with pytest.raises(ScheduleError):
        merge_vision_attention([0.2, 0.3, 0.5], [0, 1], 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_merge_conservation(seed, n):
    g = np.random.default_rng(seed)
    w = g.dirichlet(np.ones(n), size=(4, n))
    lo = int(g.integers(0, n - 1))
    hi = int(g.integers(lo + 1, n + 1))
    vis = list(range(lo, hi))
    k = int(g.choice(vis))
    out = merge_vision_attention(w, vis, k)
    other = [c for c in range(n) if c not in vis]
    assert np.array_equal(out[..., other], w[..., other])
    for h in range(4):
        for r in range(n):
            assert block_row_mass(out[h, r], vis) == block_row_mass(w[h, r], vis)
            exact = sum(Fraction(x) for x in w[h, r, vis])
            assert out[h, r, k] == float(exact)


# -- influence -----------------------------------------------------------------


def test_influence_noop_entry():
    o = np.array([1.0, -2.0, 0.5, 3.0])
    w = np.array([[0.5, 0.0, 0.5], [0.25, 0.0, 0.75]])
    v = np.arange(12.0).reshape(3, 4)
    assert influence_from_row(o, w, v, 1)[:2] == (1.0, 0.0)


def test_influence_total_mass():
    v = np.array([[0.3, -1.2, 2.0]])
    o = v[0].copy()
    cos, l2, mass = influence_from_row(o, np.array([[1.0]]), v, 0)
    assert cos == 0.0 and l2 == pytest.approx(np.linalg.norm(o), abs=1e-15) and mass == 1.0


def test_influence_causality(tiny):
    model, stream = tiny
    tr = prefill(model, stream).traces[0]
    with pytest.raises(CausalityError):
        influence_of_token(tr, 2, 3)


@pytest.mark.parametrize("seed", range(10))
def test_influence_matches_full_recompute(seed):
    g = np.random.default_rng(seed)
    cfg = ModelConfig(2, 12, 2, 16, 15, seed=seed)
    model = init_model(cfg)
    stream = random_stream(g, 12, 15, n_s=1, n_v=3, n_x=2)
    tr = prefill(model, stream).traces[1]
    for i in range(len(stream)):
        for j in range(i + 1):
            got = influence_of_token(tr, i, j)
            cos, l2 = full_recompute_influence(model, tr, i, j)
            assert abs(got.cosine - cos) <= 1e-12 and abs(got.l2 - l2) <= 1e-12


def test_probe_layer_influences_counts(tiny):
    model, stream = tiny
    recs = probe_layer_influences(model, stream, 2)
    assert [r.token for r in recs] == list(stream.vision_positions)
    with pytest.raises(ScheduleError):
        probe_layer_influences(model, stream, 1)


def test_zero_influence_drop_is_exact(tiny):
    model, stream = tiny
    tr = prefill(model, stream).traces[0]
    n = len(stream)
    j = int(stream.vision_positions[1])
    allow = np.ones((n, n), dtype=bool)
    allow[-1, j] = False
    full = run_layer(model, 1, tr.hidden_in, tr.positions, tr.modalities, LayerPlan(allow=allow))
    assert influence_of_token(full, n - 1, j).l2 == 0.0
    keep = np.arange(n) != j
    dropped = run_layer(model, 1, tr.hidden_in, tr.positions, tr.modalities, LayerPlan(keep=keep))
    assert np.array_equal(dropped.o[-1], full.o[-1])


def test_l2_ranking_invariant_under_value_scaling(tiny):
    model, stream = tiny
    tr = prefill(model, stream).traces[1]
    base = [r.l2 for r in layer_influences(tr)]
    tr.v = tr.v * 3.7
    for h in range(model.config.num_heads):
        sl = model.head_slice(h)
        tr.o[:, sl] = tr.weights[h] @ tr.v[:, sl]
    scaled = [r.l2 for r in layer_influences(tr)]
    assert list(np.argsort(base, kind="stable")) == list(np.argsort(scaled, kind="stable"))
    assert np.allclose(np.array(scaled), 3.7 * np.array(base), rtol=1e-12)


# -- detection and selection ---------------------------------------------------


def test_filtering_threshold_arithmetic():
    sweeps = [(l, [rec(0, c)]) for l, c in zip(range(2, 6), [0.999, 0.997, 0.990, 0.950])]
    assert detect_filtering_layer(sweeps) == 4
    assert detect_filtering_layer([(l, [rec(0, 1.0)]) for l in range(2, 6)]) is None


def test_select_retained_threshold():
    recs = [rec(p, l2=x) for p, x in enumerate([0.5, 0.19, 0.21, 0.0])]
    assert select_retained(recs) == ((0, 2), False)


def test_select_retained_fallback_warns():
    with pytest.warns(RuntimeWarning):
        got = select_retained([rec(p, l2=0.0) for p in (4, 5, 6)])
    assert got == ((4,), True)


def test_exit_patience_arithmetic():
    assert detect_exit_layer([(5, True), (6, False), (7, False), (8, True)]) == 7
    assert detect_exit_layer([(5, False), (6, True), (7, False), (8, True)]) is None
    assert detect_exit_layer([(5, True), (6, False)], PruneParams(exit_patience=1)) == 6


def test_exit_uses_both_thresholds():
    p = PruneParams()
    quiet = [rec(0, 0.999, 0.1)]
    loud_l2 = [rec(0, 0.999, 0.3)]
    loud_cos = [rec(0, 0.9, 0.1)]
    assert detect_exit_layer([(3, quiet), (4, quiet)], p) == 4
    assert detect_exit_layer([(3, quiet), (4, loud_l2), (5, quiet)], p) is None
    assert detect_exit_layer([(3, loud_cos), (4, quiet)], p) is None


def test_baselines_full_set_and_ties():
    fx = build_fixture("uniform", ModelConfig(3, 32, 4, 48, 30, seed=1))
    tr = prefill(fx.model, fx.stream).traces[0]
    vpos = [int(p) for p in fx.stream.vision_positions]
    assert select_baseline(tr, "attn-last", len(vpos)) == tuple(vpos)
    assert select_baseline(tr, "attn-vis", 3) == tuple(vpos[:3])
    with pytest.raises(ScheduleError):
        select_baseline(tr, "attn-last", len(vpos) + 1)


def test_baseline_picks_sink():
    fx = build_fixture("engineered-sink", ModelConfig(3, 32, 4, 48, 30, seed=4))
    tr = prefill(fx.model, fx.stream).traces[0]
    assert select_baseline(tr, "attn-last", 1) == (fx.facts["sink_position"],)


def test_params_validation():
    for bad in (dict(theta_cos=0.0), dict(theta_cos=1.5), dict(theta_l2=-1), dict(exit_patience=0),
                dict(probe_start_layer=1), dict(selector="x"), dict(baseline_top_k=0)):
        with pytest.raises(ScheduleError):
            PruneParams(**bad)


# -- schedules -----------------------------------------------------------------


def test_null_schedule_bit_identical(tiny):
    model, stream = tiny
    res = apply_schedule(model, stream, PruneParams.null())
    assert np.array_equal(res.logits, prefill(model, stream).logits)
    assert res.schedule.modes == ["dense"] * model.config.num_layers


def test_disabled_thresholds_keep_everything():
    cfg = small_config(seed=2, L=4)
    model = init_model(cfg)
    stream = random_stream(np.random.default_rng(2), cfg.hidden_dim, cfg.vocab_size)
    res = apply_schedule(model, stream, PruneParams(theta_cos=1.0, theta_l2=0.0))
    s = res.schedule
    assert s.filtering_layer == 2 and s.exit_layer is None
    assert s.retained == tuple(int(p) for p in stream.vision_positions)
    merged_only = apply_schedule(model, stream, PruneParams(skip=False, detect=False))
    assert np.array_equal(res.logits, merged_only.logits)


@pytest.mark.parametrize("seed", range(5))
def test_dead_fixture_matches_dense(seed):
    fx = build_fixture("vision-dead-after", ModelConfig(6, 32, 4, 64, 40, seed=seed), layer=3)
    res = apply_schedule(fx.model, fx.stream)
    dense = prefill(fx.model, fx.stream)
    assert np.max(np.abs(res.logits - dense.logits)) <= 1e-5
    assert res.schedule.modes == ["merge", "sparse", "sparse", "sparse", "vision-free", "vision-free"]
    assert set(fx.facts["critical_positions"]) <= set(res.schedule.retained)


def test_kv_layout_after_schedule():
    fx = build_fixture("critical-token", ModelConfig(6, 32, 4, 64, 40, seed=1), layer=3)
    res = apply_schedule(fx.model, fx.stream)
    s = res.schedule
    for layer, mods in enumerate(res.cache.modalities, start=1):
        n_vis = mods.count("vision")
        if s.filtering_layer <= layer < s.exit_layer:
            assert n_vis == len(s.retained)
        else:
            assert n_vis == 0


def test_fallback_when_undetected(tiny):
    model, stream = tiny
    c, pc = MacCounter(), MacCounter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = apply_schedule(model, stream, PruneParams(theta_cos=1e-9), c, pc)
    s = res.schedule
    assert s.filtering_layer is None and s.fallback_flags["filtering_undetected"]
    assert s.modes == ["merge"] + ["dense"] * (model.config.num_layers - 1)
    merged_only = apply_schedule(model, stream, PruneParams(skip=False, detect=False))
    assert np.array_equal(res.logits, merged_only.logits)


def test_evict_empty_and_bad_layers(tiny):
    model, stream = tiny
    cache = prefill(model, stream).cache
    same = evict_vision_kv(cache, [])
    for a, b in zip(cache.keys, same.keys):
        assert np.array_equal(a, b)
    with pytest.raises(ScheduleError):
        evict_vision_kv(cache, [0])


def test_schedule_order_checker():
    assert check_schedule_order(["merge", "skip", "skip", "sparse", "vision-free"])
    assert not check_schedule_order(["merge", "sparse", "skip"])
    assert not check_schedule_order(["skip", "merge"])
    assert not check_schedule_order(["merge", "vision-free", "sparse"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 1.0), st.floats(0.0, 1.0), st.integers(1, 3),
       st.sampled_from(["value-aware", "attn-last", "attn-text", "attn-vis"]))
def test_schedule_invariants(seed, tc, tl, patience, selector):
    g = np.random.default_rng(seed)
    cfg = small_config(seed=seed, L=int(g.integers(1, 6)))
    model = init_model(cfg)
    stream = random_stream(g, cfg.hidden_dim, cfg.vocab_size, n_v=int(g.integers(1, 6)))
    params = PruneParams(theta_cos=tc, theta_l2=tl, exit_patience=patience, selector=selector, baseline_top_k=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = apply_schedule(model, stream, params)
        b = apply_schedule(model, stream, params)
    s = a.schedule
    assert check_schedule_order(s.modes)
    assert s.to_dict() == b.schedule.to_dict() and np.array_equal(a.logits, b.logits)
    assert set(s.retained) <= set(int(p) for p in stream.vision_positions)
    if s.filtering_layer is not None:
        lf = s.filtering_layer
        assert all(m in ("merge", "skip") for m in s.modes[: lf - 1])
        end = s.exit_layer or cfg.num_layers + 1
        assert all(m == "sparse" for m in s.modes[lf - 1 : end - 1])
        assert all(m == "vision-free" for m in s.modes[end - 1 :])
