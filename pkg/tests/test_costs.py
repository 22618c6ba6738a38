import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_config
from visipruner.costs import (
    CostError,
    CostParams,
    dense_flops,
    headline,
    kv_memory,
    parse_range,
    pruned_flops,
    reconcile,
    run_shape_from_schedule,
    sweep,
    visual_attention_reduction,
    visual_attention_reduction_raw,
)
from visipruner.engine import ModelConfig, TokenStream, init_model, prefill
from visipruner.fixtures import build_fixture
from visipruner.kernels import MacCounter
from visipruner.pruner import PruneParams, apply_schedule


def test_zero_layers_costs_nothing():
    p = CostParams(0, 64, 128, 10, 5)
    for conv in ("paper", "mac"):
        assert dense_flops(p, conv)["total"] == 0


def test_paper_dense_closed_form():
    p = CostParams(2, 8, 16, 3, 2)
    n = 5
    assert dense_flops(p)["total"] == 2 * (4 * n * 64 + 2 * n * n * 8 + 3 * n * 8 * 16)


def test_llava_dense_order_of_magnitude():
    total = dense_flops(CostParams.llava7b())["total"]
    assert abs(total - 3.82e12) / 3.82e12 <= 0.15


def test_attention_reduction_bracket():
    r = visual_attention_reduction(CostParams.llava7b())
    assert 0.99 <= r <= 1.0


def test_reduction_is_one_with_nothing_retained():
    assert visual_attention_reduction(CostParams.llava7b(n_retained=0)) == 1.0


def test_reduction_clipped_at_full_retention():
    p = CostParams(4, 8, 8, 10, 2, l_shallow=0, l_middle=4, n_retained=10)
    assert visual_attention_reduction_raw(p) < 0
    assert visual_attention_reduction(p) == 0.0


@given(st.integers(0, 575))
def test_reduction_monotone_in_retained(k):
    a = visual_attention_reduction(CostParams.llava7b(n_retained=k))
    b = visual_attention_reduction(CostParams.llava7b(n_retained=k + 1))
    assert b <= a


def test_null_schedule_costs_dense():
    p = CostParams(6, 32, 64, 20, 8)
    for conv in ("paper", "mac"):
        rep = pruned_flops(p, conv)
        assert rep.pruned_total == rep.dense_total and rep.total_reduction == 0.0


def test_kv_examples():
    kv = kv_memory(CostParams.llava7b())
    assert kv["vision_reduction"] == pytest.approx(1 - (15 * 10) / (32 * 576), abs=1e-15)
    none = kv_memory(CostParams(4, 8, 8, 10, 2))
    assert none["reduction"] == 0.0 and none["dense_entries"] == 4 * 12 * 16


def test_breakdowns_sum_exactly():
    for conv in ("paper", "mac"):
        rep = pruned_flops(CostParams.llava7b(), conv)
        assert sum(rep.dense_breakdown.values()) == rep.dense_total
        assert sum(rep.pruned_breakdown.values()) == rep.pruned_total


def test_sweep_rows_monotone():
    _, values = parse_range("n_v=64..1024")
    rows = sweep(CostParams.llava7b(), values)
    assert [r["n_v"] for r in rows] == list(range(64, 1025, 64))
    rs = [r["R"] for r in rows]
    assert all(b >= a for a, b in zip(rs, rs[1:]))


def test_parse_range_errors():
    assert parse_range("n_v=2..9:3") == ("n_v", [2, 5, 8])
    for bad in ("n_v=5", "n_v=9..2", "x=a..b", "n_v=0..4"):
        with pytest.raises(CostError):
            parse_range(bad)


def test_no_vision_warns_and_reports_zero():
    with pytest.warns(RuntimeWarning):
        rep = pruned_flops(CostParams(4, 8, 8, 0, 5), "paper")
    assert rep.visual_flops_reduction == 0.0 and rep.total_reduction == 0.0


def test_invalid_params():
    with pytest.raises(CostError):
        CostParams(4, 8, 8, 10, 2, l_shallow=3, l_middle=2)
    with pytest.raises(CostError):
        CostParams(4, 8, 8, 10, 2, n_retained=11)
    with pytest.raises(CostError):
        CostParams(-1, 8, 8, 10, 2)


def test_headline_values():
    h = headline()
    assert h["R"] == pytest.approx(0.99929, abs=5e-5)
    assert h["dense_total"] == dense_flops(CostParams.llava7b())["total"]


def test_reconcile_dense_run(tiny):
    model, stream = tiny
    c = MacCounter()
    prefill(model, stream, counter=c)
    cfg = model.config
    p = CostParams(cfg.num_layers, cfg.hidden_dim, cfg.ffn_dim, stream.n_v, stream.n_s + stream.n_x,
                   vocab_size=cfg.vocab_size)
    assert dense_flops(p, "mac")["total"] == 2 * c.mac_count


def test_reconcile_pruned_run():
    fx = build_fixture("vision-dead-after", ModelConfig(6, 32, 4, 64, 40, seed=0), layer=3)
    c, pc = MacCounter(), MacCounter()
    res = apply_schedule(fx.model, fx.stream, counter=c, probe_counter=pc)
    p = CostParams.from_schedule(res.schedule, fx.model.config, fx.stream)
    rep = pruned_flops(p, "mac", shape=run_shape_from_schedule(res.schedule, fx.stream))
    r = reconcile(rep, c, pc)
    assert r["exact"], r
    # the canonical shape derived from the summary parameters agrees too
    assert reconcile(pruned_flops(p, "mac"), c, pc)["exact"]
    entries = sum(k.shape[0] for k in res.cache.keys) * 2 * fx.model.config.hidden_dim
    assert entries == kv_memory(p)["pruned_entries"]


def test_reconcile_empty_counters():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = pruned_flops(CostParams(0, 8, 8, 0, 1), "mac")
    assert reconcile(rep, MacCounter(), MacCounter())["exact"]
    paper = reconcile(pruned_flops(CostParams.llava7b(), "paper"), MacCounter())
    assert not paper["exact"] and "explanation" in paper


def test_randomized_reconciliation():
    rng = np.random.default_rng(0)
    fallbacks = 0
    for _ in range(100):
        L = int(rng.integers(1, 5))
        H = int(rng.choice([1, 2, 4]))
        d = H * int(rng.integers(2, 9))
        V = int(rng.integers(5, 30))
        cfg = ModelConfig(L, d, H, int(rng.integers(1, 40)), V, int(rng.integers(1 << 30)))
        model = init_model(cfg)
        ns, nv, nx = int(rng.integers(0, 5)), int(rng.integers(0, 10)), int(rng.integers(1, 6))
        stream = TokenStream.from_segments(d, system=rng.integers(0, V, ns),
                                           vision=rng.standard_normal((nv, d)) if nv else [],
                                           instruction=rng.integers(0, V, nx))
        params = PruneParams(theta_cos=float(rng.uniform(0.9, 1.0)), theta_l2=float(rng.uniform(0, 0.5)),
                             exit_patience=int(rng.integers(1, 3)),
                             selector=str(rng.choice(["value-aware", "attn-last", "attn-text", "attn-vis"])),
                             baseline_top_k=int(rng.integers(1, 4)), merge=bool(rng.integers(2)),
                             skip=bool(rng.integers(2)), detect=bool(rng.integers(2)))
        c, pc = MacCounter(), MacCounter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = apply_schedule(model, stream, params, c, pc)
            p = CostParams.from_schedule(res.schedule, cfg, stream)
            rep = pruned_flops(p, "mac", shape=run_shape_from_schedule(res.schedule, stream))
        fallbacks += res.schedule.fallback_flags["filtering_undetected"]
        assert reconcile(rep, c, pc)["exact"]
    assert fallbacks > 0
