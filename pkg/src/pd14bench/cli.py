"""Command-line front end: ``pd14bench {run,bench,verify,ledger}``.

Exit codes: 0 pass, 1 accuracy failure, 2 input error, 3 runtime abort.
Durations accept a unit suffix (``ms``, ``s``, ``min``, ``h``); bare numbers
are milliseconds, as in model files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfigError, ModelSpec, canonical_pd14_path, load_model_config, validate_model
from .engine import EngineError, SpikeData, SpikeFormatError, read_spikes, run, write_spikes
from .ledger import (
    BenchmarkRecord,
    LedgerError,
    add_record,
    load_ledger,
    render_performance_figure,
    save_ledger,
    shipped_records,
)
from .perf import (
    EventAccounting,
    PerfError,
    energy_per_synaptic_event,
    integrate_energy,
    planned_event_rate,
    read_power_trace,
    real_time_factor,
    synaptic_event_count,
)
from .stats import (
    InsufficientDuration,
    StatsError,
    baseline_thresholds,
    compute_statistics,
    verify_accuracy,
)

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3
MIN_PERF_MODEL_MS = 10_000.0


class InputError(Exception):
    pass


_UNITS = {"ms": 1.0, "s": 1e3, "min": 6e4, "h": 3.6e6, "": 1.0}


def parse_duration(text: str) -> float:
    """Duration in ms from e.g. ``'10s'``, ``'500ms'``, ``'15min'`` or ``'250'``."""
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*(ms|s|min|h|)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}")
    try:
        val = float(m.group(1)) * _UNITS[m.group(2)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}") from None
    if val < 0 or not math.isfinite(val):
        raise argparse.ArgumentTypeError("duration must be non-negative")
    return val


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, default=None, help="model file (default: canonical PD14)")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds (bench)")
    p.add_argument("--t-model", type=parse_duration, default=None, help="model time, e.g. 10s")
    p.add_argument("--warmup", type=parse_duration, default=None, help="warm-up, e.g. 500ms")
    p.add_argument("--drive", choices=("dc", "poisson"), default=None)
    p.add_argument("--init", choices=("original", "amended"), default=None)
    p.add_argument("--connectivity", choices=("materialized", "procedural"), default=None)
    p.add_argument("--weights", choices=("distributed", "collapsed"), default=None)
    rec = p.add_mutually_exclusive_group()
    rec.add_argument("--record", dest="record", action="store_true", default=None)
    rec.add_argument("--no-record", dest="record", action="store_false")
    p.add_argument("--power-trace", type=Path, default=None)
    p.add_argument("--clock-offset-s", type=float, default=0.0,
                   help="constant added to power-trace timestamps")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("pd14bench_out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pd14bench", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"pd14bench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one seed and write spikes and a run manifest")
    _common(p)
    p.add_argument("--binary", action="store_true", help="binary spike file")

    p = sub.add_parser("bench", help="multi-seed performance measurement")
    _common(p)
    p.add_argument("--force", action="store_true", help="allow T_model below 10 s")
    p.add_argument("--include-warmup", action="store_true", help="count warm-up toward T_wall")

    p = sub.add_parser("verify", help="compare spike statistics against reference data")
    p.add_argument("run_spikes", type=Path)
    p.add_argument("reference_spikes", type=Path)
    p.add_argument("--baseline", type=Path, nargs="+", default=None,
                   help="spike files of same-simulator seeds defining the thresholds")
    p.add_argument("--factor", type=float, default=3.0, help="threshold = factor x baseline")
    p.add_argument("--bin-width", type=parse_duration, default=2.0)
    p.add_argument("--subsample", type=int, default=200)
    p.add_argument("--pair-seed", type=int, default=0)
    p.add_argument("--strict-duration", action="store_true",
                   help="fail instead of warning below 15 min of model time")
    p.add_argument("--out", type=Path, default=Path("pd14bench_verify"))

    p = sub.add_parser("ledger", help="list, extend or plot benchmark records")
    lsub = p.add_subparsers(dest="ledger_cmd", required=True)
    q = lsub.add_parser("list")
    q.add_argument("--ledger", type=Path, default=None)
    q = lsub.add_parser("add")
    q.add_argument("--ledger", type=Path, required=True,
                   help="ledger file; created from the shipped records if missing")
    q.add_argument("--code", required=True)
    q.add_argument("--q-rtf", type=float, required=True)
    q.add_argument("--e-syn", type=float, default=None, help="uJ per synaptic event")
    q.add_argument("--simulator", required=True)
    q.add_argument("--nodes", type=int, required=True)
    q.add_argument("--system", required=True)
    q.add_argument("--process-node", type=float, required=True, help="nm")
    q.add_argument("--drive", choices=("DC", "Poisson"), required=True)
    q.add_argument("--year", type=int, required=True)
    q.add_argument("--arch", default="", help="architecture class")
    q = lsub.add_parser("plot")
    q.add_argument("--ledger", type=Path, default=None)
    q.add_argument("--out", type=Path, default=Path("pd14bench_figure"))
    return parser


# ---------------------------------------------------------------------------
# helpers


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_spec(args) -> tuple[ModelSpec, Path]:
    path = args.model or canonical_pd14_path()
    try:
        spec = load_model_config(path)
    except OSError as exc:
        raise InputError(f"cannot read model file: {exc}") from None
    changes = {}
    if args.t_model is not None:
        changes["t_model"] = args.t_model
    if args.warmup is not None:
        changes["t_warmup"] = args.warmup
    if args.init:
        changes["initial_condition_mode"] = args.init
    if args.connectivity:
        changes["connectivity_mode"] = args.connectivity
    if args.weights:
        changes["weight_mode"] = args.weights
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.seeds is not None:
        changes["n_seeds"] = args.seeds
    if args.record is not None:
        changes["record_spikes"] = args.record
    if changes.get("t_model") == 0 and "t_warmup" not in changes:
        changes["t_warmup"] = 0.0
    if changes:
        spec = spec.with_plan(**changes)
    if args.drive:
        spec = spec.with_drive_mode(args.drive)
    bad = validate_model(spec)
    if bad:
        raise InputError("invalid model after applying flags: " + "; ".join(map(str, bad)))
    return spec, Path(path)


def manifest_digest(fields: dict) -> str:
    return hashlib.sha256(json.dumps(fields, sort_keys=True, default=str).encode()).hexdigest()


def _spike_identity(spikes: SpikeData) -> dict:
    return {
        "seed": spikes.seed,
        "spec_digest": spikes.spec_digest,
        "timestep_ms": spikes.timestep,
        "t_model_ms": spikes.t_stop,
        "warmup_ms": spikes.warmup,
        "populations": ",".join(f"{n}:{s}" for n, s in zip(spikes.names, spikes.sizes)),
    }


def _versions() -> dict:
    import numba

    return {"pd14bench": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__,
            "platform": platform.platform()}


def _manifest(spec: ModelSpec, model_path: Path, seed: int, args, command: str) -> dict:
    plan = spec.plan
    inputs = {
        "command": command,
        "model_file": str(model_path),
        "model_sha256": _sha256_file(model_path),
        "spec_digest": spec.digest(),
        "seed": seed,
        "t_model_ms": plan.t_model,
        "warmup_ms": plan.t_warmup,
        "timestep_ms": plan.timestep,
        "drive": spec.drive.mode,
        "initial_conditions": plan.initial_condition_mode,
        "connectivity": plan.connectivity_mode,
        "weights": plan.weight_mode,
        "record_spikes": plan.record_spikes,
        "workers": args.workers,
    }
    return {"inputs": inputs, "input_digest": manifest_digest(inputs), "versions": _versions(),
            "created_unix_s": time.time()}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(type(x))


def _finite(x):
    return x if x is None or math.isfinite(x) else None


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    spec, model_path = _load_spec(args)
    seed = spec.plan.master_seed
    manifest = _manifest(spec, model_path, seed, args, "run")
    if not spec.plan.record_spikes:
        manifest["notes"] = ["spike recording disabled: performance runs do not record"]
    res = run(spec, seed, workers=args.workers)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    doc = {"manifest": manifest, "result": res.to_dict()}
    if res.spikes is not None:
        spikes = res.spikes
        spikes.meta["manifest_digest"] = manifest_digest(_spike_identity(spikes))
        name = "spikes.bin" if args.binary else "spikes.txt"
        write_spikes(spikes, out / name, binary=args.binary)
        doc["spike_file"] = name
        doc["spike_file_manifest_digest"] = spikes.meta["manifest_digest"]
    _write_json(out / "run.json", doc)
    c = res.counters
    print(f"seed {seed}: {c['spikes_total']} spikes, {c['events_total']} synaptic events, "
          f"construction {res.timings.construction:.2f} s, propagation {res.timings.propagation:.2f} s")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.record is None:
        args.record = False
    spec, model_path = _load_spec(args)
    plan = spec.plan
    if plan.t_model < MIN_PERF_MODEL_MS and not args.force:
        raise InputError(f"performance measurements need T_model >= 10 s (got {plan.t_model:g} ms);"
                         " pass --force to override")
    trace = None
    if args.power_trace is not None:
        try:
            trace = read_power_trace(args.power_trace, args.clock_offset_s)
        except (OSError, PerfError) as exc:
            raise InputError(f"power trace: {exc}") from None
    timed_ms = plan.t_model - (0.0 if args.include_warmup else plan.t_warmup)
    seeds = [plan.master_seed + i for i in range(plan.n_seeds)]
    per_seed = []
    for seed in seeds:
        res = run(spec, seed, workers=args.workers, record=plan.record_spikes)
        t_wall = res.timings.t_wall(args.include_warmup)
        entry = {"seed": seed, "t_wall_s": t_wall, "timings": res.timings.to_dict(),
                 "counters": res.counters}
        if timed_ms > 0:
            q, inv = real_time_factor(t_wall, timed_ms * 1e-3)
            entry.update(q_rtf=q, q_rtf_inverse=_finite(inv))
        window_s = (plan.t_model - plan.t_warmup) * 1e-3
        measured = res.counters["events_total" if args.include_warmup else "events_propagation"]
        if window_s > 0:
            names = list(res.sizes)
            rates = [res.pop_spikes[p] / (res.sizes[p] * window_s) for p in names]
            planned = planned_event_rate([res.sizes[p] for p in names],
                                         [res.k_out[p] for p in names], rates)
            entry["population_rates_Hz"] = dict(zip(names, rates))
        else:
            planned = None
        acc = EventAccounting(timed_ms * 1e-3, planned, measured)
        entry["events_measured"] = measured
        entry["events_planned"] = None if planned is None else synaptic_event_count(acc, "planned")
        if trace is not None:
            try:
                lo, hi = res.timings.window("propagation", args.include_warmup)
                e_prop = integrate_energy(trace, lo, hi)
                lo, hi = res.timings.window("construction")
                e_con = integrate_energy(trace, lo, hi)
            except PerfError as exc:
                raise InputError(f"power trace does not cover the run of seed {seed}: {exc}") from None
            entry["energy_propagation_J"] = e_prop
            entry["energy_construction_J"] = e_con
            for basis in ("measured", "planned"):
                try:
                    ev = synaptic_event_count(acc, basis)
                    entry[f"e_syn_{basis}_uJ"] = 1e6 * energy_per_synaptic_event(e_prop, ev)
                except PerfError:
                    entry[f"e_syn_{basis}_uJ"] = None
        per_seed.append(entry)
        print(f"seed {seed}: T_wall {t_wall:.3f} s" +
              (f", q_RTF {entry['q_rtf']:.4g}" if "q_rtf" in entry else ""))
    summary = {"n_seeds": len(seeds), "warmup_in_t_wall": args.include_warmup,
               "timed_model_time_s": timed_ms * 1e-3, "event_basis_default": "measured"}
    for key in ("q_rtf", "e_syn_measured_uJ", "e_syn_planned_uJ"):
        vals = [e[key] for e in per_seed if e.get(key) is not None]
        if vals:
            summary[key] = {"mean": float(np.mean(vals)),
                            "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
    manifest = _manifest(spec, model_path, plan.master_seed, args, "bench")
    manifest["inputs"]["seeds"] = seeds
    manifest["inputs"]["power_trace"] = None if trace is None else {
        "path": str(args.power_trace), "sha256": _sha256_file(args.power_trace),
        "source": trace.source, "clock_offset_s": args.clock_offset_s}
    manifest["input_digest"] = manifest_digest(manifest["inputs"])
    doc = {"manifest": manifest, "per_seed": per_seed, "summary": summary,
           "units": {"t_wall": "s", "energy": "J", "e_syn": "uJ per synaptic event",
                     "q_rtf": "dimensionless"}}
    _write_json(args.out / "bench.json", doc)
    if "q_rtf" in summary:
        print(f"q_RTF {summary['q_rtf']['mean']:.4g} +- {summary['q_rtf']['sd']:.2g} over {len(seeds)} seeds")
    return EXIT_OK


def _read_checked(path: Path, warnings: list) -> SpikeData:
    data = read_spikes(path)
    embedded = data.meta.get("manifest_digest")
    if embedded is None:
        warnings.append(f"{path}: no embedded manifest digest (external data?)")
    elif embedded != manifest_digest(_spike_identity(data)):
        raise InputError(f"{path}: header does not match its embedded manifest digest")
    return data


def cmd_verify(args) -> int:
    warnings: list[str] = []
    run_data = _read_checked(args.run_spikes, warnings)
    ref_data = _read_checked(args.reference_spikes, warnings)
    thresholds = None
    if args.baseline:
        if len(args.baseline) < 2:
            raise InputError("--baseline needs at least two spike files")
        base = [compute_statistics(_read_checked(p, warnings), None, args.bin_width,
                                   args.subsample, args.pair_seed) for p in args.baseline]
        thresholds = baseline_thresholds(base, args.factor)
    else:
        warnings.append("no --baseline given: every score must be exactly 0 to pass")
    from .stats import RECOMMENDED_ACCURACY_MS

    report = verify_accuracy(
        run_data, ref_data, thresholds,
        min_duration_ms=(RECOMMENDED_ACCURACY_MS - max(run_data.warmup, 0.0)) if args.strict_duration else None,
        bin_width=args.bin_width, subsample_size=args.subsample, pair_seed=args.pair_seed)
    report.warnings[:0] = warnings
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    args.out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["inputs"] = {
        "run": {"path": str(args.run_spikes), "sha256": _sha256_file(args.run_spikes)},
        "reference": {"path": str(args.reference_spikes), "sha256": _sha256_file(args.reference_spikes)},
        "baseline": [str(p) for p in args.baseline or []],
        "factor": args.factor,
    }
    doc["input_digest"] = manifest_digest(doc["inputs"])
    _write_json(args.out / "verify.json", doc)
    report.write_overlays(args.out / "overlays")
    n_fail = len(report.failures())
    print(f"{'PASS' if report.passed else 'FAIL'}: {len(report.verdicts) - n_fail}/"
          f"{len(report.verdicts)} scores within thresholds")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_ledger(args) -> int:
    if args.ledger_cmd == "add":
        records = load_ledger(args.ledger) if args.ledger.exists() else shipped_records()
        rec = BenchmarkRecord(args.code, args.q_rtf, args.e_syn, args.simulator, args.nodes,
                              args.system, args.process_node, args.drive, args.year,
                              architecture_class=args.arch)
        save_ledger(add_record(records, rec), args.ledger)
        print(f"added {args.code} ({len(records) + 1} records)")
        return EXIT_OK
    records = load_ledger(args.ledger) if args.ledger else shipped_records()
    if args.ledger_cmd == "list":
        print(f"{'study':<9} {'q_RTF':>7} {'E_syn/uJ':>9}  {'simulator':<12} {'nodes':>5}  "
              f"{'nm':>4}  {'drive':<7} {'year':>4}  class")
        for r in records:
            e = "--" if r.e_syn is None else f"{r.e_syn:g}"
            print(f"{r.study_code:<9} {r.q_rtf:>7g} {e:>9}  {r.simulator:<12} {r.nodes:>5}  "
                  f"{r.process_node:>4g}  {r.external_drive:<7} {r.year:>4}  {r.architecture_class}")
        return EXIT_OK
    out = render_performance_figure(records, args.out)
    print(f"wrote {out.figure} with {out.marker_counts['a']}/{out.marker_counts['b']}/"
          f"{out.marker_counts['c']} markers")
    for key, pd in out.panels.items():
        if pd.fit_intercept is not None:
            print(f"panel {key}: slope {pd.fit_slope:g}, log10 intercept {pd.fit_intercept:.6g}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "verify": cmd_verify, "ledger": cmd_ledger}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (InputError, ModelConfigError, SpikeFormatError, LedgerError, InsufficientDuration,
            StatsError, PerfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EngineError, MemoryError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
