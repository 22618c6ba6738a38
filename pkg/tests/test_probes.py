import numpy as np
import pytest

from conftest import random_stream, small_config
from visipruner.engine import ModelConfig, init_model, prefill
from visipruner.fixtures import build_fixture
from visipruner.probes import (
    ColumnMaskHooks,
    ComposedHooks,
    ProbeError,
    ProbeSpec,
    half_positions,
    knockout_cross_attention,
    logit_lens,
    mask_attended_tokens,
    mask_half,
    redistribution_check,
    run_probe,
    select_attended,
    sink_stats,
    vo_projection,
)

CFG = ModelConfig(4, 32, 4, 64, 40, seed=3)


def _fx(kind, **kw):
    return build_fixture(kind, CFG, **kw)


def test_knockout_no_layers_is_identity(tiny):
    model, stream = tiny
    rep = knockout_cross_attention(model, stream, [])
    assert rep.facts["logit_delta_norm"] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_knockout_dead_layers_no_effect(seed):
    fx = build_fixture("vision-dead-after", ModelConfig(5, 32, 4, 64, 40, seed=seed), layer=2)
    rep = knockout_cross_attention(fx.model, fx.stream, range(fx.facts["dead_after"] + 1, 6))
    assert rep.facts["logit_delta_norm"] <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_knockout_critical_flips_answer(seed):
    fx = build_fixture("critical-token", ModelConfig(4, 32, 4, 64, 40, seed=seed), layer=2)
    rep = knockout_cross_attention(fx.model, fx.stream, range(1, 5))
    assert rep.facts["argmax_dense"] == fx.facts["answer_token"]
    assert rep.facts["argmax_changed"]


def test_full_fraction_equals_knockout(tiny):
    model, stream = tiny
    a = mask_attended_tokens(model, stream, [1, 2], 1.0)
    b = knockout_cross_attention(model, stream, [1, 2])
    assert np.max(np.abs(a.logits - b.logits)) <= 1e-12


def test_sink_in_top_slice():
    fx = _fx("engineered-sink")
    tr = prefill(fx.model, fx.stream).traces[0]
    assert fx.facts["sink_position"] in select_attended(tr, 0.1, "top")


def test_bottom_selection_ties_on_uniform():
    fx = _fx("uniform")
    tr = prefill(fx.model, fx.stream).traces[0]
    vpos = [int(p) for p in fx.stream.vision_positions]
    assert select_attended(tr, 0.25, "bottom") == tuple(vpos[:2])


def test_half_split_even_and_odd(rng):
    s4 = random_stream(rng, 16, 20, n_s=1, n_v=4, n_x=2)
    v = [int(p) for p in s4.vision_positions]
    assert half_positions(s4, "left") == tuple(v[:2]) and half_positions(s4, "right") == tuple(v[2:])
    s5 = random_stream(rng, 16, 20, n_s=1, n_v=5, n_x=2)
    v = [int(p) for p in s5.vision_positions]
    assert half_positions(s5, "left") == tuple(v[:3]) and half_positions(s5, "right") == tuple(v[3:])
    s1 = random_stream(rng, 16, 20, n_s=1, n_v=1, n_x=2)
    with pytest.raises(ProbeError):
        half_positions(s1, "left")


def test_left_plus_right_is_full_knockout(tiny):
    model, stream = tiny
    both = ComposedHooks(ColumnMaskHooks([1, 2], half_positions(stream, "left")),
                         ColumnMaskHooks([1, 2], half_positions(stream, "right")))
    full = knockout_cross_attention(model, stream, [1, 2])
    assert np.array_equal(prefill(model, stream, both).logits, full.logits)
    left = mask_half(model, stream, [1, 2], "left")
    assert left.facts["masked_positions"] == list(half_positions(stream, "left"))


def test_composition_is_union(tiny):
    model, stream = tiny
    v = [int(p) for p in stream.vision_positions]
    a, b = v[:1], v[2:]
    composed = ComposedHooks(ColumnMaskHooks([1], a), ColumnMaskHooks([1], b))
    union = ColumnMaskHooks([1], a + b)
    assert np.array_equal(prefill(model, stream, composed).logits, prefill(model, stream, union).logits)


def test_masked_rows_still_normalised(tiny):
    model, stream = tiny
    res = prefill(model, stream, ColumnMaskHooks([1, 2], stream.vision_positions, vision_rows=True))
    for tr in res.traces:
        assert np.allclose(tr.weights.sum(axis=-1), 1.0, atol=1e-12)
        mods = np.asarray(tr.modalities)
        vis = mods == "vision"
        assert np.all(tr.weights[:, ~vis][:, :, vis] == 0.0)
        # each vision row keeps only its own vision column
        sub = tr.weights[:, vis][:, :, vis]
        assert np.all(sub[:, ~np.eye(vis.sum(), dtype=bool)] == 0.0)


def test_logit_lens_examples(tiny):
    model, stream = tiny
    probs, top = logit_lens(model, np.zeros(model.config.hidden_dim), top_n=3)
    assert np.allclose(probs, 1.0 / model.config.vocab_size, atol=1e-15) and top == [0, 1, 2]
    res = prefill(model, stream)
    probs, _ = logit_lens(model, res.traces[-1].hidden_out[-1])
    ex = np.exp(res.logits - res.logits.max())
    assert np.max(np.abs(probs - ex / ex.sum())) <= 1e-12
    m = model.copy()
    d = m.config.hidden_dim
    m.unembedding[:] = 0.0
    m.unembedding[:d, :d] = np.eye(d)
    h = np.zeros(d)
    h[5] = 10.0
    assert logit_lens(m, h, top_n=1)[1] == [5]


def test_vo_projection_properties(tiny):
    model, stream = tiny
    cfg = model.config
    dk = cfg.head_dim
    zero, _ = vo_projection(model, 1, 0, np.zeros(dk))
    assert np.all(zero == 0.0)
    v = np.random.default_rng(0).normal(size=dk)
    s1, t1 = vo_projection(model, 1, 1, v)
    s2, t2 = vo_projection(model, 1, 1, 2 * v)
    assert np.array_equal(s2, 2 * s1) and t1 == t2
    tr = prefill(model, stream).traces[0]
    total = sum(vo_projection(model, 1, h, tr.v[-1, model.head_slice(h)])[0] for h in range(cfg.num_heads))
    direct = model.unembedding @ (tr.v[-1] @ model.layers[0].w_o)
    assert np.max(np.abs(total - direct)) <= 1e-9
    with pytest.raises(ProbeError):
        vo_projection(model, 1, cfg.num_heads, v)


@pytest.mark.parametrize("seed", range(5))
def test_sink_stats_flags_sink(seed):
    fx = build_fixture("engineered-sink", ModelConfig(3, 32, 4, 48, 30, seed=seed))
    rows = sink_stats(prefill(fx.model, fx.stream).traces, 1)
    assert [r["position"] for r in rows if r["sink"]] == [fx.facts["sink_position"]]
    red = redistribution_check(fx.model, fx.stream, fx.facts["sink_position"])
    assert all(abs(m - 1.0) <= 1e-12 for m in red["row_mass_after"])
    assert red["gain_text"] + red["gain_vision"] == pytest.approx(red["removed_mass"], abs=1e-12)


def test_uniform_has_no_sink():
    fx = _fx("uniform")
    assert not any(r["sink"] for r in sink_stats(prefill(fx.model, fx.stream).traces, 1))


def test_probes_leave_model_untouched(tiny):
    model, stream = tiny
    before = [a.copy() for a in model._all_arrays()]
    for spec in (ProbeSpec("knockout", (1, 2), mode="C&V"), ProbeSpec("mask-attended", (1,), fraction=0.5),
                 ProbeSpec("mask-half", (2,)), ProbeSpec("logit-lens"), ProbeSpec("vo-projection", layer=2, head=1),
                 ProbeSpec("sink-stats")):
        run_probe(model, stream, spec)
    for a, b in zip(before, model._all_arrays()):
        assert np.array_equal(a, b)


def test_probe_spec_validation(tiny):
    model, _ = tiny
    for bad in (dict(kind="x"), dict(kind="knockout", mode="V"), dict(kind="mask-attended", fraction=1.5),
                dict(kind="mask-attended", which="middle"), dict(kind="mask-half", side="up")):
        with pytest.raises(ProbeError):
            ProbeSpec(**bad)
    with pytest.raises(ProbeError):
        ProbeSpec("knockout", (0,)).check_layers(model.config.num_layers)
