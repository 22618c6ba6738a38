"""Closed-form compute and KV-memory accounting.

Two conventions are reported:

``paper``
    per layer ``2 n^2 d`` for attention scores, ``4 n d^2`` for the Q/K/V/O
    projections and ``3 n d m`` for the gated FFN. Visual cost is the part of
    those sums attributable to vision tokens; pruned visual cost counts full
    layers over retained tokens in the middle range and projection + FFN work
    for all vision tokens in the shallow range.

``mac``
    2 FLOPs per multiply-accumulate of every product the engine actually
    issues, including the unembedding and the detection probes (itemised as
    overhead). For a toy run this equals ``2 * MacCounter`` exactly.

All sums are exact Python integers; only ratios are floats.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

CATEGORIES = ("attn-projections", "attn-scores", "ffn")
MAC_CATEGORIES = CATEGORIES + ("unembedding",)
CONVENTIONS = ("paper", "mac")


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    n_vision: int
    n_text: int
    l_shallow: int = 0
    l_middle: int | None = None  # default: every remaining layer
    n_retained: int | None = None  # default: all vision tokens
    vocab_size: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "n_vision", "n_text", "l_shallow", "vocab_size"):
            if getattr(self, name) < 0:
                raise CostError(f"{name} must be >= 0")
        if self.l_middle is None:
            object.__setattr__(self, "l_middle", self.num_layers - self.l_shallow)
        if self.n_retained is None:
            object.__setattr__(self, "n_retained", self.n_vision)
        if self.l_middle < 0 or self.n_retained < 0:
            raise CostError("l_middle and n_retained must be >= 0")
        if self.l_shallow + self.l_middle > self.num_layers:
            raise CostError("l_shallow + l_middle exceeds num_layers")
        if self.n_retained > self.n_vision:
            raise CostError("n_retained exceeds n_vision")

    @property
    def n(self) -> int:
        return self.n_vision + self.n_text

    @property
    def filtering_layer(self) -> int:
        return self.l_shallow + 1

    @property
    def exit_layer(self) -> int:
        return self.l_shallow + self.l_middle + 1

    @classmethod
    def llava7b(cls, **overrides) -> "CostParams":
        """LLaVA-1.5-7B shape with the reconstructed schedule (l_f = 9, l_exit = 24, 10 kept)."""
        base = dict(num_layers=32, hidden_dim=4096, ffn_dim=11008, n_vision=576, n_text=74,
                    l_shallow=8, l_middle=15, n_retained=10, vocab_size=32000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_schedule(cls, schedule, config, stream) -> "CostParams":
        """Summary parameters of a toy run's :class:`~visipruner.pruner.PruneSchedule`."""
        L = config.num_layers
        lf, le = schedule.filtering_layer, schedule.exit_layer
        if lf is None:
            return cls(L, config.hidden_dim, config.ffn_dim, stream.n_v, stream.n_s + stream.n_x,
                       vocab_size=config.vocab_size)
        end = L + 1 if le is None else le
        return cls(L, config.hidden_dim, config.ffn_dim, stream.n_v, stream.n_s + stream.n_x,
                   l_shallow=lf - 1, l_middle=end - lf, n_retained=len(schedule.retained),
                   vocab_size=config.vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return 0.0 if den == 0 else num / den


# -- paper convention ------------------------------------------------------


def _paper_layer(n: int, d: int, m: int) -> dict[str, int]:
    return {"attn-projections": 4 * n * d * d, "attn-scores": 2 * n * n * d, "ffn": 3 * n * d * m}


def _scale(cats: dict[str, int], k: int) -> dict[str, int]:
    return {c: k * v for c, v in cats.items()}


def _add(*parts: dict[str, int]) -> dict[str, int]:
    out: dict[str, int] = {}
    for p in parts:
        for c, v in p.items():
            out[c] = out.get(c, 0) + v
    return out


def _sub(a: dict[str, int], b: dict[str, int]) -> dict[str, int]:
    return {c: a[c] - b.get(c, 0) for c in a}


def paper_dense_breakdown(p: CostParams) -> dict[str, int]:
    return _scale(_paper_layer(p.n, p.hidden_dim, p.ffn_dim), p.num_layers)


def paper_visual_breakdown(p: CostParams) -> dict[str, int]:
    """Vision share of dense cost: ``L (4 n_v d^2 + 2 n_v^2 d + 3 n_v d m)``."""
    return _scale(_paper_layer(p.n_vision, p.hidden_dim, p.ffn_dim), p.num_layers)


def paper_visual_pruned_breakdown(p: CostParams) -> dict[str, int]:
    d, m, nv, nr = p.hidden_dim, p.ffn_dim, p.n_vision, p.n_retained
    middle = _scale(_paper_layer(nr, d, m), p.l_middle)
    shallow = _scale({"attn-projections": 4 * nv * d * d, "attn-scores": 0, "ffn": 3 * nv * d * m}, p.l_shallow)
    return _add(middle, shallow)


def paper_probe_overhead(p: CostParams) -> int:
    """Detection probe rows of the canonical schedule, one unit per multiply-accumulate."""
    return sum(probe_macs(c, p.hidden_dim) for c in schedule_shape(p).probes)


# -- mac convention --------------------------------------------------------


@dataclass
class RunShape:
    """Per-layer token counts of one engine run.

    ``layers`` holds ``(n, a, c)``: tokens present, rows that attend and
    key/value columns computed. ``probes`` holds the column count of each
    probe row and ``shadows`` the sequence length of each attention-only
    shadow pass.
    """

    layers: list[tuple[int, int, int]]
    probes: list[int] = field(default_factory=list)
    shadows: list[int] = field(default_factory=list)
    passes: int = 1


def mac_layer(n: int, a: int, c: int, d: int, m: int) -> dict[str, int]:
    return {"attn-projections": 2 * a * d * d + 2 * c * d * d, "attn-scores": 2 * a * c * d, "ffn": 3 * n * d * m}


def probe_macs(c: int, d: int) -> int:
    return d * d + 2 * c * d * d + 2 * c * d


def shadow_macs(n: int, d: int) -> int:
    return 2 * n * d * d + n * n * d


def mac_breakdown(shape: RunShape, d: int, m: int, vocab: int) -> tuple[dict[str, int], int]:
    """MAC count per category plus probe overhead (both exact)."""
    cats = {c: 0 for c in MAC_CATEGORIES}
    for n, a, c in shape.layers:
        cats = _add(cats, mac_layer(n, a, c, d, m))
    cats["unembedding"] = shape.passes * d * vocab
    overhead = sum(probe_macs(c, d) for c in shape.probes) + sum(shadow_macs(n, d) for n in shape.shadows)
    return cats, overhead


def layer_shapes(modes: Sequence[str], n_text: int, n_vision: int, n_retained: int) -> list[tuple[int, int, int]]:
    out = []
    cur = n_text + n_vision
    for mode in modes:
        if mode == "skip":
            out.append((cur, n_text, n_text))
            continue
        if mode == "sparse":
            cur = n_text + n_retained
        elif mode == "vision-free":
            cur = n_text
        out.append((cur, cur, cur))
    return out


def dense_shape(p: CostParams) -> RunShape:
    return RunShape([(p.n, p.n, p.n)] * p.num_layers)


def schedule_shape(p: CostParams) -> RunShape:
    """Shape of the run the pruner produces for summary parameters ``p``.

    Layer 1 merges (dense cost), layers 2..l_shallow skip, the middle range is
    sparse and the rest vision-free. Probes run at layers 2..l_exit.
    """
    L = p.num_layers
    if p.n_vision == 0 or (p.l_shallow == 0 and p.l_middle == L and p.n_retained == p.n_vision):
        return dense_shape(p)
    modes = []
    for layer in range(1, L + 1):
        if layer == 1 and p.l_shallow >= 1:
            modes.append("merge")
        elif layer <= p.l_shallow:
            modes.append("skip")
        elif layer < p.exit_layer:
            modes.append("sparse")
        else:
            modes.append("vision-free")
    probes = [p.n] * max(0, p.l_shallow)
    probes += [p.n_text + p.n_retained] * (max(0, p.l_middle - 1) + (1 if p.exit_layer <= L else 0))
    return RunShape(layer_shapes(modes, p.n_text, p.n_vision, p.n_retained), probes)


def run_shape_from_schedule(schedule, stream) -> RunShape:
    """Exact shape of a completed :func:`~visipruner.pruner.apply_schedule` run."""
    n_t, n_v, n_r = stream.n_s + stream.n_x, stream.n_v, len(schedule.retained)
    shape = RunShape(layer_shapes(schedule.modes, n_t, n_v, n_r))
    shape.probes = [schedule.probe_columns[l] for l in sorted(schedule.probe_columns)]
    if schedule.shadow_layer is not None:
        shape.shadows = [n_t + n_v]
    if schedule.first_pass_modes is not None:
        shape.layers = layer_shapes(schedule.first_pass_modes, n_t, n_v, n_r) + shape.layers
        shape.probes = [schedule.first_pass_probe_columns[l] for l in sorted(schedule.first_pass_probe_columns)]
        shape.passes = 2
    return shape


# -- reductions ------------------------------------------------------------


def visual_attention_reduction_raw(p: CostParams) -> float:
    """``1 - [L' 4 n_v'^2 d + L' n_v' n_t d] / [L 2 (n_v^2 d + n_v n_t d)]``, unclipped."""
    d, nv, nt, nr, lm = p.hidden_dim, p.n_vision, p.n_text, p.n_retained, p.l_middle
    num = lm * 4 * nr * nr * d + lm * nr * nt * d
    den = p.num_layers * 2 * (nv * nv * d + nv * nt * d)
    if den == 0:
        return 0.0
    return 1.0 - num / den


def visual_attention_reduction(p: CostParams) -> float:
    """Reduction of vision-related attention work, clipped to [0, 1].

    At full retention the numerator's ``4 n_v'^2`` term can exceed the
    denominator, so the raw value goes negative; it is clipped to 0. With no
    vision tokens the reduction is 0 by convention.
    """
    if p.n_vision == 0:
        return 0.0
    return min(1.0, max(0.0, visual_attention_reduction_raw(p)))


def kv_memory(p: CostParams) -> dict:
    """Cached key+value entries (rows x d) for the dense and pruned runs."""
    d, L = p.hidden_dim, p.num_layers
    dense = L * p.n * 2 * d
    pruned = L * p.n_text * 2 * d + p.l_middle * p.n_retained * 2 * d
    vis_dense = L * p.n_vision * 2 * d
    vis_pruned = p.l_middle * p.n_retained * 2 * d
    return {
        "dense_entries": dense,
        "pruned_entries": pruned,
        "reduction": _ratio(dense - pruned, dense),
        "vision_dense_entries": vis_dense,
        "vision_pruned_entries": vis_pruned,
        "vision_reduction": _ratio(vis_dense - vis_pruned, vis_dense),
    }


@dataclass
class FlopsReport:
    convention: str
    params: dict
    dense_total: int
    pruned_total: int
    dense_breakdown: dict
    pruned_breakdown: dict
    probe_overhead: int
    visual_attention_reduction: float
    visual_attention_reduction_raw: float
    visual_flops_reduction: float
    total_reduction: float
    total_reduction_with_overhead: float
    kv_memory: dict
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def dense_flops(p: CostParams, convention: str = "paper") -> dict:
    """Dense total and category breakdown under ``convention``."""
    if convention == "paper":
        cats = paper_dense_breakdown(p)
    elif convention == "mac":
        macs, _ = mac_breakdown(dense_shape(p), p.hidden_dim, p.ffn_dim, p.vocab_size)
        cats = _scale(macs, 2)
    else:
        raise CostError(f"convention must be one of {CONVENTIONS}")
    return {"total": sum(cats.values()), "breakdown": cats}


def _text_only(p: CostParams) -> CostParams:
    return CostParams(p.num_layers, p.hidden_dim, p.ffn_dim, 0, p.n_text, vocab_size=p.vocab_size)


def pruned_flops(p: CostParams, convention: str = "paper", shape: RunShape | None = None) -> FlopsReport:
    """Dense vs pruned cost for summary parameters ``p``.

    Under ``mac`` an explicit ``shape`` (from a real run) overrides the
    canonical schedule shape derived from ``p``.
    """
    notes = []
    if p.n_vision == 0:
        warnings.warn("no vision tokens: reductions are reported as 0", RuntimeWarning, stacklevel=2)
        notes.append("n_vision = 0: reductions defined as 0")
    if convention == "paper":
        dense = paper_dense_breakdown(p)
        vis_dense = paper_visual_breakdown(p)
        vis_pruned = paper_visual_pruned_breakdown(p)
        text = _sub(dense, vis_dense)
        pruned = _add(text, vis_pruned)
        overhead = paper_probe_overhead(p)
        vis_red = _ratio(sum(vis_dense.values()) - sum(vis_pruned.values()), sum(vis_dense.values()))
        notes.append("the cross term of the attention-reduction denominator carries a factor d")
    elif convention == "mac":
        shape = shape or schedule_shape(p)
        d, m, V = p.hidden_dim, p.ffn_dim, p.vocab_size
        dense_m, _ = mac_breakdown(dense_shape(p), d, m, V)
        pruned_m, overhead_m = mac_breakdown(shape, d, m, V)
        text_m, _ = mac_breakdown(dense_shape(_text_only(p)), d, m, V)
        dense, pruned, overhead = _scale(dense_m, 2), _scale(pruned_m, 2), 2 * overhead_m
        text = _scale(text_m, 2)
        vis_dense = sum(dense.values()) - sum(text.values())
        vis_pruned = sum(pruned.values()) - sum(text.values())
        vis_red = _ratio(vis_dense - vis_pruned, vis_dense)
        notes.append("visual share = cost above a text-only run of the same model")
    else:
        raise CostError(f"convention must be one of {CONVENTIONS}")
    dt, pt = sum(dense.values()), sum(pruned.values())
    if p.n_vision == 0:
        vis_red = 0.0
    clip = lambda x: min(1.0, max(0.0, x))
    return FlopsReport(
        convention=convention,
        params=p.to_dict(),
        dense_total=dt,
        pruned_total=pt,
        dense_breakdown=dense,
        pruned_breakdown=pruned,
        probe_overhead=overhead,
        visual_attention_reduction=visual_attention_reduction(p),
        visual_attention_reduction_raw=visual_attention_reduction_raw(p),
        visual_flops_reduction=clip(vis_red),
        total_reduction=0.0 if p.n_vision == 0 else clip(_ratio(dt - pt, dt)),
        total_reduction_with_overhead=0.0 if p.n_vision == 0 else clip(_ratio(dt - pt - overhead, dt)),
        kv_memory=kv_memory(p),
        notes=notes,
    )


def reconcile(report: FlopsReport, counter, probe_counter=None) -> dict:
    """Compare a mac-convention report with instrumented counters.

    ``counter`` holds the engine's MACs and ``probe_counter`` the detection
    overhead. Under ``mac`` both differences must be exactly 0.
    """
    engine = 0 if counter is None else counter.mac_count
    probe = 0 if probe_counter is None else probe_counter.mac_count
    out = {
        "convention": report.convention,
        "analytical_engine": report.pruned_total,
        "instrumented_engine": 2 * engine,
        "analytical_probe": report.probe_overhead,
        "instrumented_probe": 2 * probe,
    }
    out["engine_diff"] = out["analytical_engine"] - out["instrumented_engine"]
    out["probe_diff"] = out["analytical_probe"] - out["instrumented_probe"]
    out["exact"] = out["engine_diff"] == 0 and out["probe_diff"] == 0
    if report.convention != "mac":
        out["explanation"] = ("paper units count one operation per multiply-accumulate, omit the unembedding "
                              "and the probe rows, and attribute attention to vision tokens by block")
    return out


def sweep(base: CostParams, n_vision_values: Iterable[int]) -> list[dict]:
    """One row per vision count: R plus visual and total reduction (paper convention)."""
    rows = []
    for nv in n_vision_values:
        p = CostParams(base.num_layers, base.hidden_dim, base.ffn_dim, nv, base.n_text, base.l_shallow,
                       base.l_middle, min(base.n_retained, nv), base.vocab_size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = pruned_flops(p, "paper")
        rows.append({
            "n_v": nv,
            "n_t": p.n_text,
            "L_prime": p.l_middle,
            "n_v_prime": p.n_retained,
            "R": rep.visual_attention_reduction,
            "visual_reduction": rep.visual_flops_reduction,
            "total_reduction": rep.total_reduction,
        })
    return rows


def parse_range(text: str) -> tuple[str, list[int]]:
    """``name=start..stop[:step]``; the step defaults to ``start``."""
    try:
        name, span = text.split("=", 1)
        step = None
        if ":" in span:
            span, step_s = span.split(":", 1)
            step = int(step_s)
        lo_s, hi_s = span.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
    except ValueError as exc:
        raise CostError(f"bad sweep range {text!r}; expected name=start..stop[:step]") from exc
    step = step or lo
    if lo < 0 or hi < lo or step <= 0:
        raise CostError(f"bad sweep range {text!r}")
    return name.strip(), list(range(lo, hi + 1, step))


def headline(p: CostParams | None = None) -> dict:
    """Headline numbers for the LLaVA-7B preset under the ``paper`` convention."""
    p = p or CostParams.llava7b()
    rep = pruned_flops(p, "paper")
    return {
        "dense_total": rep.dense_total,
        "pruned_total": rep.pruned_total,
        "R": rep.visual_attention_reduction,
        "visual_flops_reduction": rep.visual_flops_reduction,
        "total_reduction": rep.total_reduction,
        "vision_kv_reduction": rep.kv_memory["vision_reduction"],
    }

