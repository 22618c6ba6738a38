"""Batch experiment driver: ``python -m visipruner {run,flops,trace}``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 I/O error. Failures print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import costs, probes, pruner, reporting
from .engine import ModelConfig, StateError, StreamError, TokenStream, init_model, prefill
from .fixtures import FixtureError, build_fixture
from .kernels import DegenerateRowError, MacCounter

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4
DEFAULT_OUT = "visipruner-out"


class ConfigError(Exception):
    def __init__(self, message: str, errors: list[dict] | None = None):
        super().__init__(message)
        self.errors = errors or [{"field": "<root>", "message": message}]


class InvariantViolation(Exception):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant
        self.detail = detail


# -- config ----------------------------------------------------------------


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    errs = reporting.validation_errors(cfg, "config")
    if errs:
        raise ConfigError("config failed schema validation", errs)
    return cfg


def resolve_out(cli_out: str | None, cfg: dict | None = None) -> Path:
    env = os.environ.get("VISIPRUNER_OUT")
    if env:
        return Path(env)
    if cli_out:
        return Path(cli_out)
    if cfg and cfg.get("output", {}).get("dir"):
        return Path(cfg["output"]["dir"])
    return Path(DEFAULT_OUT)


def build_inputs(cfg: dict):
    """Model, stream and expected facts (or None) from a validated config."""
    seed = int(cfg.get("seed", 0))
    try:
        mc = ModelConfig(seed=seed, **cfg["model"])
    except ValueError as exc:
        raise ConfigError(str(exc), [{"field": "model", "message": str(exc)}]) from exc
    st = dict(cfg.get("stream", {}))
    kind = st.pop("fixture", None)
    n_s, n_v, n_x = st.get("n_system", 3), st.get("n_vision", 8), st.get("n_instruction", 5)
    if kind is not None:
        kw = {k: st[k] for k in ("layer", "window_start", "n_critical", "designated") if st.get(k) is not None}
        try:
            fx = build_fixture(kind, mc, n_system=n_s, n_vision=n_v, n_instruction=n_x, **kw)
        except FixtureError as exc:
            raise ConfigError(str(exc), [{"field": "stream", "message": str(exc)}]) from exc
        return fx.model, fx.stream, fx.facts
    model = init_model(mc)
    rng = np.random.default_rng([seed, 7])
    V = mc.vocab_size
    try:
        stream = TokenStream.from_segments(
            mc.hidden_dim,
            system=rng.integers(0, V, n_s),
            vision=rng.standard_normal((n_v, mc.hidden_dim)) if n_v else [],
            instruction=rng.integers(0, V, n_x),
        )
    except StreamError as exc:
        raise ConfigError(str(exc), [{"field": "stream", "message": str(exc)}]) from exc
    return model, stream, None


def build_params(cfg: dict) -> pruner.PruneParams:
    try:
        return pruner.PruneParams(**cfg.get("prune", {}))
    except pruner.ScheduleError as exc:
        raise ConfigError(str(exc), [{"field": "prune", "message": str(exc)}]) from exc


def build_probe_specs(cfg: dict, num_layers: int) -> list[probes.ProbeSpec]:
    out = []
    for i, raw in enumerate(cfg.get("probes", [])):
        raw = dict(raw)
        if "layers" in raw:
            raw["layers"] = tuple(raw["layers"])
        try:
            spec = probes.ProbeSpec(**raw)
            spec.check_layers(num_layers)
        except probes.ProbeError as exc:
            raise ConfigError(str(exc), [{"field": f"probes/{i}", "message": str(exc)}]) from exc
        out.append(spec)
    return out


# -- commands --------------------------------------------------------------


def _formats(args, cfg: dict | None, default: list[str]) -> list[str]:
    if args.format:
        return list(dict.fromkeys(args.format))
    if cfg and cfg.get("output", {}).get("formats"):
        return list(cfg["output"]["formats"])
    return default


def trace_record(tr, full: bool = False) -> dict:
    rec = {
        "layer": tr.layer,
        "positions": tr.positions,
        "modalities": list(tr.modalities),
        "last_row_attention": tr.weights[:, -1, :],
        "value_l1": tr.value_l1,
        "hidden_norms": np.linalg.norm(tr.hidden_out, axis=1),
    }
    if full:
        rec["full"] = {"weights": tr.weights, "q": tr.q, "k": tr.k, "v": tr.v, "o": tr.o,
                       "hidden_in": tr.hidden_in, "hidden_out": tr.hidden_out}
    return rec


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    model, stream, fixture_facts = build_inputs(cfg)
    params = build_params(cfg)
    specs = build_probe_specs(cfg, model.config.num_layers)
    formats = _formats(args, cfg, ["json", "csv"])
    convention = args.convention or cfg.get("costs", {}).get("convention", "both")
    out = resolve_out(args.out, cfg)

    dense_counter = MacCounter()
    dense = prefill(model, stream, counter=dense_counter)
    counter, probe_counter = MacCounter(), MacCounter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pruner.apply_schedule(model, stream, params, counter, probe_counter)
        cp = costs.CostParams.from_schedule(res.schedule, model.config, stream)
        shape = costs.run_shape_from_schedule(res.schedule, stream)
        reports = {}
        if convention in ("paper", "both"):
            reports["paper"] = costs.pruned_flops(cp, "paper")
        mac = costs.pruned_flops(cp, "mac", shape=shape)
        if convention in ("mac", "both"):
            reports["mac"] = mac
    rec = costs.reconcile(mac, counter, probe_counter)
    if not rec["exact"]:
        raise InvariantViolation("mac-reconciliation", f"engine diff {rec['engine_diff']}, probe diff {rec['probe_diff']}")
    if costs.dense_flops(cp, "mac")["total"] != 2 * dense_counter.mac_count:
        raise InvariantViolation("mac-reconciliation", "dense closed form disagrees with the dense counter")
    if not pruner.check_schedule_order(res.schedule.modes):
        raise InvariantViolation("schedule-monotonicity", " -> ".join(res.schedule.modes))

    delta = np.abs(res.logits - dense.logits)
    facts = {
        "model": model.config.to_dict(),
        "stream": {"n_system": stream.n_s, "n_vision": stream.n_v, "n_instruction": stream.n_x},
        "fixture_facts": fixture_facts,
        "schedule": res.schedule.to_dict(),
        "dense_argmax": int(np.argmax(dense.logits)),
        "pruned_argmax": int(np.argmax(res.logits)),
        "argmax_agree": bool(np.argmax(dense.logits) == np.argmax(res.logits)),
        "logit_delta_max_abs": float(delta.max()),
        "bit_identical": bool(np.array_equal(dense.logits, res.logits)),
        "costs": {k: r.to_dict() for k, r in reports.items()},
        "reconcile": rec,
        "warnings": sorted({str(w.message) for w in caught}),
    }
    judgments = {
        "logits_within_1e-5": facts["logit_delta_max_abs"] <= 1e-5,
        "argmax_agree": facts["argmax_agree"],
        "mac_reconciled": bool(rec["exact"]),
    }
    if not (params.merge or params.skip or params.detect):
        judgments["null_schedule_bit_identical"] = facts["bit_identical"]
    if fixture_facts:
        if "filtering_layer" in fixture_facts:
            judgments["filtering_layer_matches"] = res.schedule.filtering_layer == fixture_facts["filtering_layer"]
        if fixture_facts.get("kind") in ("critical-token", "vision-dead-after"):
            judgments["exit_layer_matches"] = res.schedule.exit_layer == fixture_facts.get("exit_layer")

    probe_files = []
    probe_payloads = []
    for i, spec in enumerate(specs):
        rep = probes.run_probe(model, stream, spec)
        stem = f"probe_{i:02d}_{spec.kind}"
        probe_payloads.append((stem, rep))
        if "json" in formats:
            probe_files.append(f"{stem}.json")
        if "csv" in formats and rep.csv_rows():
            probe_files.append(f"{stem}.csv")
    facts["probe_files"] = probe_files
    summary = {"version": 1, "config": cfg, "facts": facts, "judgments": judgments}
    errs = reporting.validation_errors(reporting.to_jsonable(summary), "summary")
    if errs:
        raise InvariantViolation("report-schema", json.dumps(errs, sort_keys=True))

    for stem, rep in probe_payloads:
        if "json" in formats:
            reporting.write_json(out / f"{stem}.json", rep.to_dict(), "probe")
        if "csv" in formats and rep.csv_rows():
            reporting.write_csv(out / f"{stem}.csv", rep.csv_rows(), ["layer", "delta_norm", "argmax_changed"])
    if "jsonl" in formats:
        reporting.write_jsonl(out / "trace_dense.jsonl", (trace_record(t) for t in dense.traces), "trace")
    reporting.write_json(out / "schedule.json", res.schedule.to_dict(), "schedule")
    reporting.write_json(out / "summary.json", summary, "summary")
    print(json.dumps({"status": "ok", "out": str(out), "judgments": judgments}, sort_keys=True))
    return EXIT_OK


def _cost_params_from_args(args) -> costs.CostParams:
    base = costs.CostParams.llava7b().to_dict() if args.llava7b_preset else {
        "num_layers": 32, "hidden_dim": 4096, "ffn_dim": 11008, "n_vision": 576, "n_text": 74,
        "l_shallow": 0, "l_middle": None, "n_retained": None, "vocab_size": 0}
    for name in ("num_layers", "hidden_dim", "ffn_dim", "n_vision", "n_text", "l_shallow", "l_middle",
                 "n_retained", "vocab_size"):
        val = getattr(args, name)
        if val is not None:
            base[name] = val
    if args.n_vision is not None and args.n_retained is None and base["n_retained"] is not None:
        base["n_retained"] = min(base["n_retained"], args.n_vision)
    if args.filtering_layer is not None:
        lf = args.filtering_layer
        if args.l_shallow is not None and args.l_shallow != lf - 1:
            raise ConfigError("--l-shallow contradicts --filtering-layer", [{"field": "l_shallow", "message": "must equal filtering_layer - 1"}])
        base["l_shallow"] = lf - 1
        if args.exit_layer is not None:
            if args.exit_layer <= lf:
                raise ConfigError("exit layer must come after the filtering layer", [{"field": "exit_layer", "message": "must exceed filtering_layer"}])
            lm = args.exit_layer - lf
            if args.l_middle is not None and args.l_middle != lm:
                raise ConfigError("--l-middle contradicts the layer range", [{"field": "l_middle", "message": "must equal exit_layer - filtering_layer"}])
            base["l_middle"] = lm
    elif args.exit_layer is not None:
        raise ConfigError("--exit-layer needs --filtering-layer", [{"field": "exit_layer", "message": "requires filtering_layer"}])
    if base["l_middle"] is not None and base["l_middle"] + base["l_shallow"] > base["num_layers"]:
        raise ConfigError("schedule exceeds the layer count", [{"field": "l_middle", "message": "l_shallow + l_middle > num_layers"}])
    try:
        return costs.CostParams(**base)
    except costs.CostError as exc:
        raise ConfigError(str(exc)) from exc


PRESET_BRACKETS = {
    "dense_total_within_15pct_of_3.82e12": lambda r: abs(r.dense_total - 3.82e12) <= 0.15 * 3.82e12,
    "R_in_0.98_0.9995": lambda r: 0.98 <= r.visual_attention_reduction <= 0.9995,
    "visual_flops_reduction_within_3pp_of_62.8": lambda r: abs(r.visual_flops_reduction - 0.628) <= 0.03,
    "total_reduction_within_3pp_of_53.9": lambda r: abs(r.total_reduction - 0.539) <= 0.03,
}


def cmd_flops(args) -> int:
    p = _cost_params_from_args(args)
    sweep_values = None
    if args.sweep:
        try:
            name, sweep_values = costs.parse_range(args.sweep)
        except costs.CostError as exc:
            raise ConfigError(str(exc), [{"field": "sweep", "message": str(exc)}]) from exc
        if name not in ("n_v", "n_vision"):
            raise ConfigError(f"cannot sweep {name!r}", [{"field": "sweep", "message": "only n_v can be swept"}])
    formats = _formats(args, None, ["json", "csv"] if sweep_values else ["json"])
    conventions = ["paper", "mac"] if args.convention in (None, "both") else [args.convention]
    out = resolve_out(args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reports = [costs.pruned_flops(p, c) for c in conventions]
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    doc = {
        "version": 1,
        "reports": [r.to_dict() for r in reports],
        "warnings": sorted({str(w.message) for w in caught}),
        "reconcile": None,
        "facts": {"params": p.to_dict(), "filtering_layer": p.filtering_layer, "exit_layer": p.exit_layer},
    }
    paper = next((r for r in reports if r.convention == "paper"), None)
    if args.llava7b_preset and paper is not None:
        doc["judgments"] = {k: bool(f(paper)) for k, f in PRESET_BRACKETS.items()}
    if "json" in formats:
        reporting.write_json(out / "flops.json", doc, "flops")
    if "csv" in formats:
        rows = costs.sweep(p, sweep_values if sweep_values else [p.n_vision])
        reporting.write_csv(out / "sweep.csv", rows, ["n_v", "n_t", "L_prime", "n_v_prime", "R",
                                                      "visual_reduction", "total_reduction"])
    print(json.dumps({"status": "ok", "out": str(out), "judgments": doc.get("judgments", {})}, sort_keys=True))
    return EXIT_OK


def parse_layers(text: str | None, num_layers: int) -> list[int]:
    if not text:
        return list(range(1, num_layers + 1))
    layers = set()
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                layers.update(range(lo, hi + 1))
            else:
                layers.add(int(part))
    except ValueError as exc:
        raise ConfigError(f"bad --layers value {text!r}", [{"field": "layers", "message": "expected e.g. 1,3-5"}]) from exc
    bad = [l for l in layers if not 1 <= l <= num_layers]
    if bad or not layers:
        raise ConfigError(f"layers {sorted(bad)} outside [1, {num_layers}]", [{"field": "layers", "message": f"must lie in [1, {num_layers}]"}])
    return sorted(layers)


def cmd_trace(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    model, stream, _ = build_inputs(cfg)
    layers = parse_layers(args.layers, model.config.num_layers)
    out = resolve_out(args.out, cfg)
    res = prefill(model, stream)
    recs = [trace_record(res.traces[l - 1], args.full_matrices) for l in layers]
    reporting.write_jsonl(out / "trace.jsonl", recs, "trace")
    print(json.dumps({"status": "ok", "out": str(out), "layers": layers}, sort_keys=True))
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="visipruner", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (VISIPRUNER_OUT overrides)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--format", action="append", choices=["json", "csv", "jsonl"], help="repeatable")

    run = sub.add_parser("run", help="dense vs pruned run, probes and cost reports")
    common(run)
    run.add_argument("--convention", choices=["paper", "mac", "both"])
    run.set_defaults(func=cmd_run)

    fl = sub.add_parser("flops", help="closed-form cost report")
    fl.add_argument("--out")
    fl.add_argument("--format", action="append", choices=["json", "csv"])
    fl.add_argument("--convention", choices=["paper", "mac", "both"])
    fl.add_argument("--sweep", help="n_v=START..STOP[:STEP]")
    fl.add_argument("--llava7b-preset", action="store_true")
    for name in ("num-layers", "hidden-dim", "ffn-dim", "n-vision", "n-text", "l-shallow", "l-middle",
                 "n-retained", "vocab-size", "filtering-layer", "exit-layer"):
        fl.add_argument(f"--{name}", type=int)
    fl.set_defaults(func=cmd_flops)

    tr = sub.add_parser("trace", help="export dense layer traces as JSONL")
    common(tr)
    tr.add_argument("--layers", help="e.g. 1,3-5 (default: all)")
    tr.add_argument("--full-matrices", action="store_true", help="include every matrix (large)")
    tr.set_defaults(func=cmd_trace)
    return ap


def _fail(code: int, kind: str, message: str, **extra) -> int:
    rec = {"status": "error", "exit_code": code, "kind": kind, "message": message}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), errors=exc.errors)
    except (jsonschema.ValidationError, pruner.ScheduleError, probes.ProbeError, costs.CostError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except InvariantViolation as exc:
        return _fail(EXIT_INVARIANT, "invariant", str(exc), invariant=exc.invariant)
    except (StateError, DegenerateRowError) as exc:
        return _fail(EXIT_INVARIANT, "invariant", str(exc), invariant=type(exc).__name__)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
