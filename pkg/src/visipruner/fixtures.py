"""Engineered models whose attention behaviour is known in advance.

Every fixture starts from a random model and reserves the last four hidden
dimensions as constant flags: ``SINK`` (the first system token), ``TEXT``,
``VIS`` and ``CRIT`` (designated vision tokens). No layer writes into the flag
dimensions, so they survive the residual stream unchanged. Three columns in
every head's query/key slice are driven only by flags:

* column 0: vision queries x sink key. Vision rows lock onto the sink token,
  whose value is exactly zero, so their attention output is (numerically) zero
  whether or not they attend.
* column 1: text queries x ``VIS`` key. A large negative bias makes vision
  invisible to text rows ("dead" layers).
* column 2: text queries x ``CRIT`` key. Cancels the dead bias for designated
  tokens and adds a positive score in their alive layers.

Position encodings are switched off so the engineered facts do not depend on
where tokens sit in the stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import LayerContext, LayerPlan, Model, ModelConfig, PruneHooks, TokenStream, init_model, prefill

FIXTURE_KINDS = ("engineered-sink", "critical-token", "vision-dead-after", "uniform")

SINK_LOCK = 300.0  # vision query -> sink key score
DEAD_BIAS = 300.0  # text query -> vision key penalty in dead layers
FLAG = 1.0  # flag magnitude relative to sqrt(d)


class FixtureError(ValueError):
    pass


@dataclass
class Fixture:
    kind: str
    model: Model
    stream: TokenStream
    facts: dict = field(default_factory=dict)


def _flag_dims(d: int) -> dict[str, int]:
    return {"SINK": d - 4, "TEXT": d - 3, "VIS": d - 2, "CRIT": d - 1}


class _BlockVisionForText(PruneHooks):
    # Mask text rows -> vision columns before softmax in the given layers.
    def __init__(self, layers):
        self.layers = set(layers)

    def plan_layer(self, ctx: LayerContext) -> LayerPlan:
        if ctx.layer not in self.layers:
            return LayerPlan()
        vis = np.asarray([m == "vision" for m in ctx.modalities])
        allow = ~(np.outer(~vis, vis))
        return LayerPlan(allow=allow)


def build_fixture(
    kind: str,
    config: ModelConfig,
    *,
    n_system: int = 3,
    n_vision: int = 8,
    n_instruction: int = 5,
    layer: int | None = None,
    window_start: int | None = None,
    n_critical: int = 2,
    designated: int | None = None,
) -> Fixture:
    """Build ``(model, stream, facts)`` for one of :data:`FIXTURE_KINDS`.

    ``layer`` is the designated layer: the influence layer of
    ``critical-token`` and the last alive layer of ``vision-dead-after``.
    ``designated`` picks the vision index (0-based within the vision segment)
    of the sink / critical token.
    """
    if kind not in FIXTURE_KINDS:
        raise FixtureError(f"unknown fixture kind {kind!r}; expected one of {FIXTURE_KINDS}")
    d, L, H, dk = config.hidden_dim, config.num_layers, config.num_heads, config.head_dim
    if dk < 4 or d < 8:
        raise FixtureError("fixtures need head_dim >= 4 and hidden_dim >= 8")
    if n_system < 1 or n_vision < 1 or n_instruction < 1:
        raise FixtureError("fixtures need at least one token in every segment")
    if config.vocab_size < n_system + n_instruction + 2:
        raise FixtureError("vocabulary too small for the fixture stream")

    rng = np.random.default_rng([config.seed, FIXTURE_KINDS.index(kind)])
    flags = _flag_dims(d)
    content = np.arange(d - 4)
    F = FLAG * math.sqrt(d)
    # nominal normalised flag value for a token with unit-variance content
    f_nom = F / math.sqrt((F * F + (d - 4)) / d)
    gain = math.sqrt(dk) / (f_nom * f_nom)

    # per-layer biases in score units, index 0 unused
    vis_bias = np.zeros(L + 1)
    crit_bias = np.zeros(L + 1)
    facts: dict = {"kind": kind}
    vision_content = rng.standard_normal((n_vision, d - 4))
    crit_idx: list[int] = []

    if kind == "engineered-sink":
        sink = n_vision // 2 if designated is None else designated
        if not 0 <= sink < n_vision:
            raise FixtureError("designated sink outside the vision segment")
        crit_idx = [sink]
        crit_bias[1] = 8.0
        vision_content[sink] = 0.0
    elif kind == "critical-token":
        ell = 2 if layer is None else layer
        if not 2 <= ell <= L:
            raise FixtureError("critical-token layer must lie in [2, L]")
        j = int(rng.integers(n_vision)) if designated is None else designated
        if not 0 <= j < n_vision:
            raise FixtureError("designated token outside the vision segment")
        crit_idx = [j]
        vis_bias[1:] = -DEAD_BIAS
        crit_bias[ell] = DEAD_BIAS + 4.0
        facts.update(layer=ell, filtering_layer=ell)
        if ell + 2 <= L:
            facts["exit_layer"] = ell + 2
    elif kind == "vision-dead-after":
        ell = L if layer is None else layer
        start = max(2, ell - 1) if window_start is None else window_start
        if not 2 <= start <= ell <= L:
            raise FixtureError("need 2 <= window_start <= layer <= L")
        if not 1 <= n_critical <= n_vision:
            raise FixtureError("n_critical must lie in [1, n_vision]")
        crit_idx = sorted(rng.choice(n_vision, size=n_critical, replace=False).tolist())
        vis_bias[1:] = -DEAD_BIAS
        for l in range(start, ell + 1):
            crit_bias[l] = DEAD_BIAS + 2.0
        facts.update(dead_after=ell, filtering_layer=start)
        if ell + 2 <= L:
            facts["exit_layer"] = ell + 2
    else:  # uniform
        vision_content[:] = vision_content[0]

    base = init_model(config).copy()
    # token ids: 0 is the sink, everything else carries the TEXT flag
    base.embedding[:, d - 4 :] = 0.0
    base.embedding[:, flags["TEXT"]] = F
    base.embedding[0] = 0.0
    base.embedding[0, flags["SINK"]] = F
    base.pos_scale[:] = 0.0

    flag_rows = list(flags.values())
    for l, lw in enumerate(base.layers, start=1):
        for w in (lw.w_o, lw.w_down):
            w[:, d - 4 :] = 0.0
        lw.w_v[flags["SINK"]] = 0.0
        lw.w_gate[flags["SINK"]] = 0.0
        lw.w_up[flags["SINK"]] = 0.0
        if kind == "engineered-sink":
            lw.w_v[[flags["VIS"], flags["CRIT"]]] = 0.0
        for h in range(H):
            c0, c1, c2 = h * dk, h * dk + 1, h * dk + 2
            eng = [c0, c1, c2]
            lw.w_q[np.ix_(content, eng)] = 0.0
            lw.w_k[np.ix_(content, eng)] = 0.0
            lw.w_q[np.ix_(flag_rows, np.arange(h * dk, (h + 1) * dk))] = 0.0
            lw.w_k[np.ix_(flag_rows, np.arange(h * dk, (h + 1) * dk))] = 0.0
            lw.w_q[flags["VIS"], c0] = 1.0
            lw.w_k[flags["SINK"], c0] = SINK_LOCK * gain
            lw.w_q[flags["TEXT"], c1] = 1.0
            lw.w_k[flags["VIS"], c1] = vis_bias[l] * gain
            lw.w_q[flags["TEXT"], c2] = 1.0
            lw.w_k[flags["CRIT"], c2] = crit_bias[l] * gain

    vision = np.zeros((n_vision, d))
    vision[:, content] = vision_content
    vision[:, flags["VIS"]] = F
    vision[crit_idx, flags["CRIT"]] = F
    system_ids = [0] + list(range(1, n_system))
    instr_ids = list(range(n_system, n_system + n_instruction))
    stream = TokenStream.from_segments(d, system=system_ids, vision=vision, instruction=instr_ids)
    vpos = stream.vision_positions
    facts["sink_token"] = 0
    if kind == "engineered-sink":
        facts["sink_position"] = int(vpos[crit_idx[0]])
    elif kind == "critical-token":
        facts["critical_position"] = int(vpos[crit_idx[0]])
        answer = config.vocab_size - 1
        _calibrate_answer(base, stream, facts["layer"], answer)
        facts["answer_token"] = answer
    elif kind == "vision-dead-after":
        facts["critical_positions"] = [int(vpos[i]) for i in crit_idx]
    return Fixture(kind, base.freeze(), stream, facts)


def _calibrate_answer(model: Model, stream: TokenStream, layer: int, answer: int, margin: float = 1.0) -> None:
    """Rewrite one unembedding row so the critical token decides the argmax.

    The row is the least-norm vector that puts ``answer`` ``margin`` above
    every other logit in the dense run and ``margin`` below the best one when
    text cannot see vision at ``layer``.
    """
    model.unembedding[answer] = 0.0
    dense = prefill(model, stream).traces[-1].hidden_out[-1]
    blocked = prefill(model, stream, _BlockVisionForText([layer])).traces[-1].hidden_out[-1]
    others = np.delete(model.unembedding, answer, axis=0)
    target = np.array([np.max(others @ dense) + margin, np.max(others @ blocked) - margin])
    row, *_ = np.linalg.lstsq(np.vstack([dense, blocked]), target, rcond=None)
    model.unembedding[answer] = row
