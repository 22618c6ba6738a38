"""Three-stage visual token pruning on top of the engine.

Stage 1 merges all text-to-vision attention of the first layer onto a single
vision column. Stage 2 (shallow layers) keeps text rows away from vision and
lets vision rows skip attention, while a side-channel probe of the last input
token measures how much each vision token would change its attention output.
The first layer where some token pushes the cosine below ``theta_cos`` is the
filtering layer; tokens with an L2 effect of at least ``theta_l2`` there are
retained and everything else is dropped. Stage 3 keeps probing the retained
tokens and drops them once they show no measurable impact for
``exit_patience`` consecutive layers.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .engine import (
    KvCache,
    LayerContext,
    LayerPlan,
    LayerTrace,
    Model,
    PruneHooks,
    TokenStream,
    prefill,
)
from .kernels import MacCounter, cosine_and_l2, masked_softmax, matmul, rms_norm

SELECTORS = ("value-aware", "attn-last", "attn-text", "attn-vis")
MODES = ("merge", "dense", "skip", "dense-probe", "sparse", "vision-free")


class ScheduleError(ValueError):
    pass


class CausalityError(ValueError):
    pass


@dataclass(frozen=True)
class PruneParams:
    merge_layer: int = 1
    probe_start_layer: int = 2
    theta_cos: float = 0.995
    theta_l2: float = 0.2
    exit_patience: int = 2
    selector: str = "value-aware"
    baseline_top_k: int = 10
    merge_position: int | None = None  # absolute position; default first vision token
    merge: bool = True
    skip: bool = True
    detect: bool = True
    exit_theta_cos: float | None = None  # exit test thresholds; default to theta_*
    exit_theta_l2: float | None = None

    def __post_init__(self):
        if not 0.0 < self.theta_cos <= 1.0:
            raise ScheduleError("theta_cos must lie in (0, 1]")
        if self.theta_l2 < 0.0:
            raise ScheduleError("theta_l2 must be >= 0")
        if self.exit_patience < 1:
            raise ScheduleError("exit_patience must be >= 1")
        if self.merge_layer != 1:
            raise ScheduleError("merging is only defined for layer 1")
        if self.merge_layer >= self.probe_start_layer:
            raise ScheduleError("merge_layer must precede probe_start_layer")
        if self.selector not in SELECTORS:
            raise ScheduleError(f"selector must be one of {SELECTORS}")
        if self.baseline_top_k < 1:
            raise ScheduleError("baseline_top_k must be >= 1")

    @property
    def exit_cos(self) -> float:
        return self.theta_cos if self.exit_theta_cos is None else self.exit_theta_cos

    @property
    def exit_l2(self) -> float:
        return self.theta_l2 if self.exit_theta_l2 is None else self.exit_theta_l2

    @classmethod
    def null(cls) -> "PruneParams":
        """Schedule that leaves the dense model untouched."""
        return cls(merge=False, skip=False, detect=False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InfluenceRecord:
    layer: int
    token: int  # absolute stream position
    cosine: float
    l2: float
    attention_mass: float  # summed over heads, probed row only


# -- attention merging -----------------------------------------------------


def merge_vision_attention(weights, vision_cols: Sequence[int], k: int) -> np.ndarray:
    """Move each row's vision mass onto column ``k``.

    ``weights`` is any (..., n) stack of attention rows. The merged entry is
    the correctly rounded sum of the row's vision entries, the remaining vision
    entries become 0 and non-vision entries are returned untouched.
    """
    w = np.array(weights, dtype=np.float64, copy=True)
    vis = np.asarray(sorted(set(int(c) for c in vision_cols)), dtype=np.int64)
    if k not in set(vis.tolist()):
        raise ScheduleError(f"merge position {k} is not a vision column")
    flat = w.reshape(-1, w.shape[-1])
    merged = np.array([math.fsum(row) for row in flat[:, vis]])
    flat[:, vis] = 0.0
    flat[:, k] = merged
    return flat.reshape(w.shape)


def block_row_mass(row, vision_cols) -> float:
    """Row mass as (exact sum of non-vision) + (exact sum of vision) entries."""
    row = np.asarray(row, dtype=np.float64)
    mask = np.zeros(row.shape[-1], dtype=bool)
    mask[list(vision_cols)] = True
    return math.fsum(row[~mask]) + math.fsum(row[mask])


# -- influence -------------------------------------------------------------


def influence_from_row(o_row, w_row, v, col: int) -> tuple[float, float, float]:
    """Cosine/L2 between ``o_row`` and the output with column ``col`` zeroed.

    ``w_row`` is the (H, n) attention of the probed row, ``v`` the (n, d)
    values. No renormalisation: the entry is zeroed in every head and the
    output recomputed. Returns (cosine, l2, summed weight).
    """
    o_row = np.asarray(o_row, dtype=np.float64)
    H = w_row.shape[0]
    dk = o_row.shape[0] // H
    removed = np.concatenate([w_row[h, col] * v[col, h * dk : (h + 1) * dk] for h in range(H)])
    o_masked = o_row - removed
    cos, l2 = cosine_and_l2(o_row, o_masked)
    return cos, l2, float(w_row[:, col].sum())


def influence_of_token(trace: LayerTrace, i: int, j: int) -> InfluenceRecord:
    """Influence of position ``j`` on the attention output of position ``i``."""
    if j > i:
        raise CausalityError(f"token {i} cannot attend to later token {j}")
    ii, jj = trace.index_of(i), trace.index_of(j)
    cos, l2, mass = influence_from_row(trace.o[ii], trace.weights[:, ii, :], trace.v, jj)
    return InfluenceRecord(trace.layer, int(j), cos, l2, mass)


def layer_influences(trace: LayerTrace, candidates: Iterable[int] | None = None, row: int | None = None) -> list[InfluenceRecord]:
    """Records for every candidate column (default: vision) against ``row`` (default: last)."""
    row = int(trace.positions[-1]) if row is None else row
    if candidates is None:
        candidates = [int(p) for p, m in zip(trace.positions, trace.modalities) if m == "vision"]
    return [influence_of_token(trace, row, int(j)) for j in candidates]


@dataclass
class ProbeRow:
    """Side-channel attention of the last input token at one layer."""

    layer: int
    positions: np.ndarray
    weights: np.ndarray  # (H, n)
    values: np.ndarray  # (n, d)
    output: np.ndarray  # (d,)

    def records(self, candidates: Iterable[int]) -> list[InfluenceRecord]:
        index = {int(p): c for c, p in enumerate(self.positions)}
        out = []
        for j in candidates:
            cos, l2, mass = influence_from_row(self.output, self.weights, self.values, index[int(j)])
            out.append(InfluenceRecord(self.layer, int(j), cos, l2, mass))
        return out


def probe_last_row(model: Model, layer: int, hidden, positions, counter: MacCounter | None = None) -> ProbeRow:
    """Dense attention row of the last position over every position present.

    Nothing here feeds back into the residual stream. Costs one query
    projection, key/value projections for all ``n`` columns, and ``2 n d``
    for scores and the weighted value sum.
    """
    cfg = model.config
    lw = model.layers[layer - 1]
    a = rms_norm(hidden, lw.attn_norm)
    q = matmul(a[-1:], lw.w_q, counter)
    k = matmul(a, lw.w_k, counter)
    v = matmul(a, lw.w_v, counter)
    H, dk = cfg.num_heads, cfg.head_dim
    w = np.zeros((H, a.shape[0]))
    out = np.zeros(cfg.hidden_dim)
    for h in range(H):
        sl = model.head_slice(h)
        w[h] = masked_softmax(matmul(q[:, sl], k[:, sl].T, counter) / math.sqrt(dk))[0]
        out[sl] = matmul(w[h : h + 1], v[:, sl], counter)[0]
    return ProbeRow(layer, np.asarray(positions).copy(), w, v, out)


def probe_layer_influences(model: Model, stream: TokenStream, layer: int, params: PruneParams | None = None,
                           traces: Sequence[LayerTrace] | None = None) -> list[InfluenceRecord]:
    """Influence of each vision token on the last input token at ``layer`` of a dense run."""
    params = params or PruneParams()
    if layer < params.probe_start_layer:
        raise ScheduleError(f"probing starts at layer {params.probe_start_layer}")
    traces = traces if traces is not None else prefill(model, stream).traces
    tr = traces[layer - 1]
    return layer_influences(tr)


# -- detection and selection -----------------------------------------------


def _as_sweeps(sweeps) -> list[tuple[int, list[InfluenceRecord]]]:
    if isinstance(sweeps, Mapping):
        return sorted((int(k), list(v)) for k, v in sweeps.items())
    return [(int(layer), list(recs)) for layer, recs in sweeps]


def detect_filtering_layer(sweeps, params: PruneParams | None = None) -> int | None:
    """First layer whose smallest cosine drops below ``theta_cos``."""
    params = params or PruneParams()
    for layer, recs in _as_sweeps(sweeps):
        if layer < params.probe_start_layer or not recs:
            continue
        if min(r.cosine for r in recs) < params.theta_cos:
            return layer
    return None


class RetainedSet(NamedTuple):
    positions: tuple[int, ...]
    fallback: bool


def select_retained(records: Sequence[InfluenceRecord], params: PruneParams | None = None) -> RetainedSet:
    """Tokens whose L2 effect reaches ``theta_l2``; falls back to the argmax-L2 token."""
    params = params or PruneParams()
    if not records:
        raise ScheduleError("no influence records to select from")
    keep = tuple(sorted(r.token for r in records if r.l2 >= params.theta_l2))
    if keep:
        return RetainedSet(keep, False)
    best = min(records, key=lambda r: (-r.l2, r.token))
    warnings.warn("no vision token reached theta_l2; keeping the argmax-l2 token", RuntimeWarning, stacklevel=2)
    return RetainedSet((best.token,), True)


def top_k_positions(scores: Mapping[int, float], k: int, largest: bool = True) -> tuple[int, ...]:
    """Top (or bottom) ``k`` keys by score; lower position wins ties."""
    sign = -1.0 if largest else 1.0
    order = sorted(scores, key=lambda p: (sign * scores[p], p))
    return tuple(sorted(order[:k]))


def attention_scores(trace: LayerTrace, strategy: str) -> dict[int, float]:
    """Attention received by each vision column, summed over heads and source rows."""
    mods = np.asarray(trace.modalities)
    vis_idx = np.flatnonzero(mods == "vision")
    if strategy == "attn-last":
        rows = np.asarray([len(mods) - 1])
    elif strategy == "attn-text":
        rows = np.flatnonzero(mods == "instruction")
    elif strategy == "attn-vis":
        rows = vis_idx
    else:
        raise ScheduleError(f"unknown baseline strategy {strategy!r}")
    mass = trace.weights[:, rows, :].sum(axis=(0, 1)) if rows.size else np.zeros(len(mods))
    return {int(trace.positions[c]): float(mass[c]) for c in vis_idx}


def select_baseline(trace: LayerTrace, strategy: str, k: int) -> tuple[int, ...]:
    scores = attention_scores(trace, strategy)
    if k > len(scores):
        raise ScheduleError(f"k={k} exceeds the {len(scores)} vision tokens present")
    return top_k_positions(scores, k)


def has_impact(records: Sequence[InfluenceRecord], params: PruneParams) -> bool:
    """A layer matters unless every record has cosine >= theta and l2 < theta."""
    return not all(r.cosine >= params.exit_cos and r.l2 < params.exit_l2 for r in records)


def detect_exit_layer(history, params: PruneParams | None = None) -> int | None:
    """Last layer of the first run of ``exit_patience`` consecutive no-impact layers.

    ``history`` is a sequence of ``(layer, records)`` or ``(layer, impact_bool)``
    starting at the filtering layer.
    """
    params = params or PruneParams()
    run = 0
    for layer, item in history:
        impact = item if isinstance(item, (bool, np.bool_)) else has_impact(item, params)
        run = 0 if impact else run + 1
        if run >= params.exit_patience:
            return int(layer)
    return None


# -- schedule --------------------------------------------------------------


@dataclass
class PruneSchedule:
    params: PruneParams
    num_layers: int
    filtering_layer: int | None = None
    retained: tuple[int, ...] = ()
    exit_layer: int | None = None
    modes: list[str] = field(default_factory=list)
    fallback_flags: dict = field(default_factory=lambda: {"filtering_undetected": False, "empty_retained": False})
    probe_columns: dict[int, int] = field(default_factory=dict)
    shadow_layer: int | None = None
    first_pass_modes: list[str] | None = None
    first_pass_probe_columns: dict[int, int] | None = None
    sweeps: dict[int, list[InfluenceRecord]] = field(default_factory=dict)

    def mode(self, layer: int) -> str:
        return self.modes[layer - 1]

    def to_dict(self) -> dict:
        return {
            "filtering_layer": self.filtering_layer,
            "retained_positions": list(self.retained),
            "exit_layer": self.exit_layer,
            "per_layer_modes": list(self.modes),
            "params": self.params.to_dict(),
            "fallback_flags": dict(self.fallback_flags),
        }


class ScheduleResult(NamedTuple):
    schedule: PruneSchedule
    logits: np.ndarray
    traces: list[LayerTrace]
    cache: KvCache


class VisiPrunerHooks(PruneHooks):
    """Stateful hooks that build a :class:`PruneSchedule` during one prefill."""

    def __init__(self, params: PruneParams, stream: TokenStream, probe_counter: MacCounter | None = None,
                 force_dense: bool = False):
        self.params = params
        self.stream = stream
        self.probe_counter = probe_counter
        self.force_dense = force_dense
        self.vision = set(int(p) for p in stream.vision_positions)
        self.phase = "shallow"
        self.schedule = PruneSchedule(params, 0)
        self.history: list[tuple[int, bool]] = []
        k = params.merge_position
        if k is None and self.vision:
            k = min(self.vision)
        if params.merge and self.vision and k not in self.vision:
            raise ScheduleError(f"merge position {k} is not a vision position")
        self.merge_position = k

    def _is_vision(self, modalities) -> np.ndarray:
        return np.asarray([m == "vision" for m in modalities], dtype=bool)

    def _record(self, mode: str) -> None:
        self.schedule.modes.append(mode)

    def _merge_plan(self, ctx: LayerContext) -> LayerPlan:
        vis = self._is_vision(ctx.modalities)
        text_rows = np.flatnonzero(~vis)
        vis_cols = np.flatnonzero(vis)
        k_col = int(np.flatnonzero(ctx.positions == self.merge_position)[0])

        def edit(weights):
            out = weights.copy()
            out[:, text_rows, :] = merge_vision_attention(weights[:, text_rows, :], vis_cols, k_col)
            return out

        return LayerPlan(edit_weights=edit)

    def plan_layer(self, ctx: LayerContext) -> LayerPlan:
        p = self.params
        layer = ctx.layer
        vis = self._is_vision(ctx.modalities)
        if layer == p.merge_layer:
            if p.merge and vis.any():
                self._record("merge")
                return self._merge_plan(ctx)
            self._record("dense")
            return LayerPlan()
        if layer < p.probe_start_layer or not vis.any() and self.phase == "shallow":
            self._record("dense")
            return LayerPlan()
        if self.force_dense:
            self._record("dense")
            return LayerPlan()

        if self.phase == "shallow":
            if p.detect:
                row = probe_last_row(ctx.model, layer, ctx.hidden, ctx.positions, self.probe_counter)
                self.schedule.probe_columns[layer] = len(ctx.positions)
                cands = [int(x) for x in ctx.positions[vis]]
                recs = row.records(cands)
                self.schedule.sweeps[layer] = recs
                if detect_filtering_layer([(layer, recs)], p) == layer:
                    return self._enter_sparse(ctx, recs)
            if p.skip:
                self._record("skip")
                allow = ~np.outer(~vis, vis)
                return LayerPlan(allow=allow, skip_rows=vis)
            self._record("dense-probe" if p.detect else "dense")
            return LayerPlan()

        if self.phase == "sparse":
            row = probe_last_row(ctx.model, layer, ctx.hidden, ctx.positions, self.probe_counter)
            self.schedule.probe_columns[layer] = len(ctx.positions)
            recs = row.records(self.schedule.retained)
            self.schedule.sweeps[layer] = recs
            self.history.append((layer, has_impact(recs, p)))
            exit_layer = detect_exit_layer(self.history, p)
            if exit_layer is not None:
                self.schedule.exit_layer = exit_layer
                self.phase = "vision-free"
                self._record("vision-free")
                return LayerPlan(keep=~vis)
            self._record("sparse")
            return LayerPlan()

        self._record("vision-free")
        return LayerPlan(keep=~vis) if vis.any() else LayerPlan()

    def _enter_sparse(self, ctx: LayerContext, recs: list[InfluenceRecord]) -> LayerPlan:
        p = self.params
        layer = ctx.layer
        sched = self.schedule
        sched.filtering_layer = layer
        if p.selector == "value-aware":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                chosen = select_retained(recs, p)
            for w in caught:
                warnings.warn(w.message, w.category, stacklevel=2)
            sched.retained = chosen.positions
            sched.fallback_flags["empty_retained"] = chosen.fallback
        else:
            tr = shadow_attention(ctx.model, layer, ctx.hidden, ctx.positions, ctx.modalities, self.probe_counter)
            sched.shadow_layer = layer
            k = min(p.baseline_top_k, int(self._is_vision(ctx.modalities).sum()))
            sched.retained = select_baseline(tr, p.selector, k)
        kept = set(sched.retained)
        retained_recs = [r for r in recs if r.token in kept]
        self.history = [(layer, has_impact(retained_recs, p))]
        self.phase = "sparse"
        exit_layer = detect_exit_layer(self.history, p)
        vis = self._is_vision(ctx.modalities)
        if exit_layer is not None:
            sched.exit_layer = exit_layer
            self.phase = "vision-free"
            self._record("vision-free")
            return LayerPlan(keep=~vis)
        self._record("sparse")
        keep = np.asarray([(not v) or int(pos) in kept for v, pos in zip(vis, ctx.positions)])
        return LayerPlan(keep=keep)


def shadow_attention(model: Model, layer: int, hidden, positions, modalities, counter: MacCounter | None = None) -> LayerTrace:
    """Dense causal attention weights only (no values, no residual update).

    Used by the attention-based baseline selectors, which need every row.
    Costs ``2 n d^2 + n^2 d`` multiply-accumulates.
    """
    cfg = model.config
    lw = model.layers[layer - 1]
    n = hidden.shape[0]
    a = rms_norm(hidden, lw.attn_norm)
    q = matmul(a, lw.w_q, counter)
    k = matmul(a, lw.w_k, counter)
    allow = positions[None, :] <= positions[:, None]
    w = np.zeros((cfg.num_heads, n, n))
    for h in range(cfg.num_heads):
        sl = model.head_slice(h)
        w[h] = masked_softmax(matmul(q[:, sl], k[:, sl].T, counter) / math.sqrt(cfg.head_dim), allow)
    zeros = np.zeros((n, cfg.hidden_dim))
    return LayerTrace(layer, np.asarray(positions), tuple(modalities), w, q, k, zeros, zeros, hidden, hidden,
                      np.ones(n, dtype=bool), np.zeros(n, dtype=bool))


def evict_vision_kv(cache: KvCache, layers: Iterable[int]) -> KvCache:
    """Copy of ``cache`` with vision positions removed from the given 1-based layers."""
    layers = set(int(l) for l in layers)
    if any(not 1 <= l <= cache.num_layers for l in layers):
        raise ScheduleError(f"layers must lie in [1, {cache.num_layers}]")
    out = KvCache([], [], [], [], cache.next_position)
    for idx in range(cache.num_layers):
        pos, mods = cache.positions[idx], cache.modalities[idx]
        keys, vals = cache.keys[idx], cache.values[idx]
        if idx + 1 in layers:
            keep = np.asarray([m != "vision" for m in mods], dtype=bool)
            pos, keys, vals = pos[keep], keys[keep], vals[keep]
            mods = tuple(m for m, k in zip(mods, keep) if k)
        out.positions.append(pos.copy())
        out.modalities.append(tuple(mods))
        out.keys.append(keys.copy())
        out.values.append(vals.copy())
    return out


def apply_schedule(model: Model, stream: TokenStream, params: PruneParams | None = None,
                   counter: MacCounter | None = None, probe_counter: MacCounter | None = None) -> ScheduleResult:
    """Run the pruned prefill and return the schedule, logits, traces and cache.

    When no filtering layer is found the prefill is repeated with layer 1
    merged and every later layer dense, and the schedule is flagged.
    """
    params = params or PruneParams()
    L = model.config.num_layers
    hooks = VisiPrunerHooks(params, stream, probe_counter)
    res = prefill(model, stream, hooks, counter)
    sched = hooks.schedule
    sched.num_layers = L
    uses_detection = params.detect and stream.n_v > 0 and params.probe_start_layer <= L
    if uses_detection and sched.filtering_layer is None:
        first_modes, first_probes = list(sched.modes), dict(sched.probe_columns)
        dense_hooks = VisiPrunerHooks(params, stream, probe_counter, force_dense=True)
        res = prefill(model, stream, dense_hooks, counter)
        sched.modes = dense_hooks.schedule.modes
        sched.first_pass_modes = first_modes
        sched.first_pass_probe_columns = first_probes
        sched.fallback_flags["filtering_undetected"] = True
        cache = res.cache
    else:
        evict = [l for l, m in enumerate(sched.modes, start=1) if m in ("merge", "skip", "vision-free")]
        if sched.filtering_layer is None:
            evict = [l for l in evict if sched.modes[l - 1] != "merge"]
        cache = evict_vision_kv(res.cache, evict) if evict else res.cache
    return ScheduleResult(sched, res.logits, res.traces, cache)


def check_schedule_order(modes: Sequence[str]) -> bool:
    """True when modes read merge? -> (skip|dense-probe|dense)* -> sparse* -> vision-free*."""
    rank = {"merge": 0, "dense": 1, "skip": 1, "dense-probe": 1, "sparse": 2, "vision-free": 3}
    ranks = [rank[m] for m in modes]
    if "merge" in modes[1:]:
        return False
    return all(a <= b for a, b in zip(ranks, ranks[1:]))
