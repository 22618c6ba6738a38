"""Diagnostic probes over the engine.

Masking here always means excluding columns before the softmax, so surviving
entries are renormalised. This is different from the influence measurement in
:mod:`visipruner.pruner`, which zeroes one weight after the softmax.

All probes are read-only: they build hooks, run fresh prefills and compare
against the dense run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import LayerContext, LayerPlan, LayerTrace, Model, PruneHooks, TokenStream, prefill, run_layer, unembed
from .kernels import masked_softmax, matmul
from .pruner import top_k_positions

PROBE_KINDS = ("knockout", "mask-attended", "mask-half", "logit-lens", "vo-projection", "sink-stats")
MASK_CRITERIA = ("attn-last", "attn-text", "pos-near-text")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    kind: str
    layers: tuple[int, ...] = ()
    mode: str = "C"  # knockout: C or C&V
    fraction: float = 0.1
    which: str = "top"
    criterion: str = "attn-last"
    side: str = "left"
    layer: int = 1  # single-layer probes
    head: int = 0
    top_n: int = 5
    softmax: bool = False

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ProbeError(f"unknown probe kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ProbeError("fraction must lie in [0, 1]")
        if self.mode not in ("C", "C&V"):
            raise ProbeError("mode must be 'C' or 'C&V'")
        if self.which not in ("top", "bottom"):
            raise ProbeError("which must be 'top' or 'bottom'")
        if self.criterion not in MASK_CRITERIA:
            raise ProbeError(f"criterion must be one of {MASK_CRITERIA}")
        if self.side not in ("left", "right"):
            raise ProbeError("side must be 'left' or 'right'")

    def check_layers(self, num_layers: int) -> None:
        for l in tuple(self.layers) + (self.layer,):
            if not 1 <= l <= num_layers:
                raise ProbeError(f"layer {l} outside [1, {num_layers}]")


@dataclass
class ProbeReport:
    kind: str
    facts: dict = field(default_factory=dict)
    per_layer: list[dict] = field(default_factory=list)
    tokens: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    logits: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "facts": self.facts, "per_layer": self.per_layer,
                "tokens": self.tokens, "notes": self.notes}

    def csv_rows(self) -> list[dict]:
        return [{"layer": r["layer"], "delta_norm": r["delta_norm"], "argmax_changed": r["argmax_changed"]}
                for r in self.per_layer if "delta_norm" in r]


# -- masking hooks ---------------------------------------------------------


class ColumnMaskHooks(PruneHooks):
    """Exclude ``columns`` (absolute positions) from text rows before the softmax.

    With ``vision_rows`` set, vision rows also lose every vision column except
    their own diagonal entry.
    """

    def __init__(self, layers: Iterable[int], columns: Iterable[int], vision_rows: bool = False):
        self.layers = set(int(l) for l in layers)
        self.columns = set(int(c) for c in columns)
        self.vision_rows = vision_rows

    def allow(self, ctx: LayerContext) -> np.ndarray | None:
        if ctx.layer not in self.layers:
            return None
        vis = np.asarray([m == "vision" for m in ctx.modalities], dtype=bool)
        cols = np.asarray([int(p) in self.columns for p in ctx.positions], dtype=bool)
        deny = np.outer(~vis, cols)
        if self.vision_rows:
            deny |= np.outer(vis, vis) & ~np.eye(len(vis), dtype=bool)
        return ~deny

    def plan_layer(self, ctx: LayerContext) -> LayerPlan:
        return LayerPlan(allow=self.allow(ctx))


class ComposedHooks(PruneHooks):
    """Intersection of the ``allow`` masks of several :class:`ColumnMaskHooks`."""

    def __init__(self, *hooks: ColumnMaskHooks):
        self.hooks = hooks

    def plan_layer(self, ctx: LayerContext) -> LayerPlan:
        allow = None
        for h in self.hooks:
            a = h.allow(ctx)
            if a is not None:
                allow = a if allow is None else allow & a
        return LayerPlan(allow=allow)


def _compare(model: Model, stream: TokenStream, hooks: PruneHooks, kind: str, dense=None) -> ProbeReport:
    dense = dense or prefill(model, stream)
    run = prefill(model, stream, hooks)
    delta = run.logits - dense.logits
    rep = ProbeReport(kind)
    rep.facts = {
        "logit_delta_norm": float(np.linalg.norm(delta)),
        "logit_delta_max_abs": float(np.max(np.abs(delta))),
        "argmax_dense": int(np.argmax(dense.logits)),
        "argmax_probe": int(np.argmax(run.logits)),
        "argmax_changed": bool(np.argmax(dense.logits) != np.argmax(run.logits)),
    }
    for td, tp in zip(dense.traces, run.traces):
        hd, hp = td.hidden_out[-1], tp.hidden_out[-1]
        rep.per_layer.append({
            "layer": td.layer,
            "delta_norm": float(np.linalg.norm(hp - hd)),
            "argmax_changed": bool(np.argmax(unembed(model, hd)) != np.argmax(unembed(model, hp))),
        })
    rep.logits = run.logits
    return rep


def knockout_cross_attention(model: Model, stream: TokenStream, layers: Iterable[int], mode: str = "C") -> ProbeReport:
    """Block text->vision attention (and vision->vision for ``C&V``) in ``layers``."""
    if mode not in ("C", "C&V"):
        raise ProbeError("mode must be 'C' or 'C&V'")
    layers = sorted(set(int(l) for l in layers))
    hooks = ColumnMaskHooks(layers, stream.vision_positions, vision_rows=(mode == "C&V"))
    rep = _compare(model, stream, hooks, "knockout")
    rep.facts.update(layers=layers, mode=mode)
    return rep


def attention_criterion_scores(trace: LayerTrace, criterion: str) -> dict[int, float]:
    mods = np.asarray(trace.modalities)
    vis_idx = np.flatnonzero(mods == "vision")
    if criterion == "pos-near-text":
        return {int(trace.positions[c]): float(trace.positions[c]) for c in vis_idx}
    if criterion == "attn-last":
        rows = np.asarray([len(mods) - 1])
    elif criterion == "attn-text":
        rows = np.flatnonzero(mods == "instruction")
    else:
        raise ProbeError(f"unknown criterion {criterion!r}")
    mass = trace.weights[:, rows, :].sum(axis=(0, 1))
    return {int(trace.positions[c]): float(mass[c]) for c in vis_idx}


def select_attended(trace: LayerTrace, fraction: float, which: str = "top", criterion: str = "attn-last") -> tuple[int, ...]:
    """``ceil(n_v * fraction)`` vision positions ranked by ``criterion``; lower index wins ties."""
    scores = attention_criterion_scores(trace, criterion)
    count = math.ceil(len(scores) * fraction)
    return top_k_positions(scores, count, largest=(which == "top"))


def mask_attended_tokens(model: Model, stream: TokenStream, layers: Iterable[int], fraction: float,
                         which: str = "top", criterion: str = "attn-last") -> ProbeReport:
    if not 0.0 < fraction <= 1.0:
        raise ProbeError("fraction must lie in (0, 1]")
    dense = prefill(model, stream)
    chosen = select_attended(dense.traces[0], fraction, which, criterion)
    layers = sorted(set(int(l) for l in layers))
    rep = _compare(model, stream, ColumnMaskHooks(layers, chosen), "mask-attended", dense)
    rep.facts.update(layers=layers, fraction=fraction, which=which, criterion=criterion, masked_positions=list(chosen))
    return rep


def half_positions(stream: TokenStream, side: str) -> tuple[int, ...]:
    vpos = [int(p) for p in stream.vision_positions]
    if len(vpos) < 2:
        raise ProbeError("half masking needs at least two vision tokens")
    cut = math.ceil(len(vpos) / 2)
    if side == "left":
        return tuple(vpos[:cut])
    if side == "right":
        return tuple(vpos[cut:])
    raise ProbeError("side must be 'left' or 'right'")


def mask_half(model: Model, stream: TokenStream, layers: Iterable[int], side: str = "left") -> ProbeReport:
    chosen = half_positions(stream, side)
    layers = sorted(set(int(l) for l in layers))
    rep = _compare(model, stream, ColumnMaskHooks(layers, chosen), "mask-half")
    rep.facts.update(layers=layers, side=side, masked_positions=list(chosen))
    return rep


# -- projections -----------------------------------------------------------


def _top(scores: np.ndarray, n: int) -> list[int]:
    # stable sort keeps lower ids first among equal scores
    return [int(i) for i in np.argsort(-scores, kind="stable")[:n]]


def logit_lens(model: Model, hidden, top_n: int = 5) -> tuple[np.ndarray, list[int]]:
    """Vocabulary distribution ``softmax(W_u h)`` and its ``top_n`` ids."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (model.config.hidden_dim,):
        raise ProbeError(f"hidden must have shape ({model.config.hidden_dim},)")
    probs = masked_softmax(unembed(model, hidden))
    return probs, _top(probs, top_n)


def vo_projection(model: Model, layer: int, head: int, value, top_n: int = 5,
                  softmax: bool = False) -> tuple[np.ndarray, list[int]]:
    """Project one head's value vector through its ``W_o`` rows and the unembedding.

    Raw scores by default; ``softmax=True`` normalises them for display.
    """
    cfg = model.config
    if not 1 <= layer <= cfg.num_layers or not 0 <= head < cfg.num_heads:
        raise ProbeError("layer/head out of range")
    value = np.asarray(value, dtype=np.float64).reshape(1, -1)
    if value.shape[1] != cfg.head_dim:
        raise ProbeError(f"value must have length {cfg.head_dim}")
    w_o = model.layers[layer - 1].w_o[model.head_slice(head)]
    scores = unembed(model, matmul(value, w_o)[0])
    if softmax:
        scores = masked_softmax(scores)
    return scores, _top(scores, top_n)


def lens_by_layer(model: Model, traces: Sequence[LayerTrace], top_n: int = 5) -> list[dict]:
    rows = []
    for tr in traces:
        probs, top = logit_lens(model, tr.hidden_out[-1], top_n)
        rows.append({"layer": tr.layer, "top_ids": top, "top_probs": [float(probs[i]) for i in top]})
    return rows


# -- sinks -----------------------------------------------------------------


SINK_MASS_PERCENTILE = 90.0


def sink_stats(traces, layer: int | None = None) -> list[dict]:
    """Per-vision-token last-row mass, value L1 norm and sink flag.

    ``mass`` is the head-averaged attention the last row gives the token. A
    token is flagged when its mass is strictly above the 90th percentile
    (linear interpolation) of vision masses and its value L1 norm is strictly
    below their median, so exact ties are never flagged.
    """
    tr = traces if isinstance(traces, LayerTrace) else traces[(layer or 1) - 1]
    mods = np.asarray(tr.modalities)
    vis_idx = np.flatnonzero(mods == "vision")
    if vis_idx.size == 0:
        return []
    mass = tr.weights[:, -1, vis_idx].mean(axis=0)
    l1 = tr.value_l1[vis_idx]
    hi = np.percentile(mass, SINK_MASS_PERCENTILE)
    med = np.median(l1)
    return [
        {"position": int(tr.positions[c]), "mass": float(m), "value_l1": float(v), "sink": bool(m > hi and v < med)}
        for c, m, v in zip(vis_idx, mass, l1)
    ]


def redistribution_check(model: Model, stream: TokenStream, position: int, layer: int = 1) -> dict:
    """Re-run ``layer`` with ``position`` excluded from the last row and see where its mass goes."""
    dense = prefill(model, stream)
    tr = dense.traces[layer - 1]
    n = len(tr.positions)
    allow = np.ones((n, n), dtype=bool)
    allow[-1, tr.index_of(position)] = False
    masked = run_layer(model, layer, tr.hidden_in, tr.positions, tr.modalities, LayerPlan(allow=allow))
    before = tr.weights[:, -1, :].mean(axis=0)
    after = masked.weights[:, -1, :].mean(axis=0)
    text = np.asarray([m != "vision" for m in tr.modalities])
    gain = after - before
    return {
        "layer": layer,
        "removed_position": int(position),
        "removed_mass": float(before[tr.index_of(position)]),
        "row_mass_after": [float(masked.weights[h, -1].sum()) for h in range(masked.weights.shape[0])],
        "gain_text": float(gain[text].sum()),
        "gain_vision": float(gain[~text].sum() + before[tr.index_of(position)]),
        "top_gainer": int(tr.positions[int(np.argmax(gain))]),
    }


# -- dispatch --------------------------------------------------------------


def run_probe(model: Model, stream: TokenStream, spec: ProbeSpec) -> ProbeReport:
    spec.check_layers(model.config.num_layers)
    if spec.kind == "knockout":
        return knockout_cross_attention(model, stream, spec.layers, spec.mode)
    if spec.kind == "mask-attended":
        return mask_attended_tokens(model, stream, spec.layers, spec.fraction, spec.which, spec.criterion)
    if spec.kind == "mask-half":
        return mask_half(model, stream, spec.layers, spec.side)
    dense = prefill(model, stream)
    rep = ProbeReport(spec.kind)
    if spec.kind == "logit-lens":
        rep.per_layer = lens_by_layer(model, dense.traces, spec.top_n)
    elif spec.kind == "vo-projection":
        tr = dense.traces[spec.layer - 1]
        sl = model.head_slice(spec.head)
        scores, top = vo_projection(model, spec.layer, spec.head, tr.v[-1, sl], spec.top_n, spec.softmax)
        rep.facts = {"layer": spec.layer, "head": spec.head, "top_ids": top,
                     "top_scores": [float(scores[i]) for i in top], "softmax": spec.softmax}
    else:
        rep.tokens = sink_stats(dense.traces, spec.layer)
        rep.facts = {"layer": spec.layer, "flagged": [t["position"] for t in rep.tokens if t["sink"]]}
        rep.notes.append("sink flag: mass above the 90th percentile and value L1 below the median")
        if rep.facts["flagged"]:
            rep.facts["redistribution"] = redistribution_check(model, stream, rep.facts["flagged"][0], spec.layer)
    return rep
