"""Command-line entry points.

Subcommands wire the modules into reproducible experiments:

  gen-synthetic   emit a synthetic profile zoo, validation set, devices, trace
  plan            run the offline optimizer, write plan.json + planning log
  simulate        virtual-clock run of a plan against a trace
  serve           wall-clock run with the threaded runtime (trace replay)
  report          summarize run directories (cost, p95, accuracy, timeline)

Exit codes: 0 ok; 1 latency SLO violated at p95 in a simulate/serve run;
2 planning found the workload infeasible. Everything is deterministic under
--seed except wall-clock serve timings.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import engine, formats, planner, serving, synth
from .types import Slo, zipf_distribution

EXIT_OK = 0
EXIT_SLO_VIOLATION = 1
EXIT_INFEASIBLE = 2


@dataclass
class ExperimentConfig:
    profiles_path: Path
    validation_path: Path
    devices_path: Path
    trace_path: Path | None
    slo: Slo
    qps_max: float
    n_ranges: int
    zipf_s: float
    seed: int
    out_dir: Path

    def validate(self) -> None:
        for p in (self.profiles_path, self.validation_path, self.devices_path,
                  self.trace_path):
            if p is not None and not Path(p).exists():
                raise ValueError(f"input file does not exist: {p}")
        if self.n_ranges < 1:
            raise ValueError(f"n_ranges must be >= 1, got {self.n_ranges}")
        if self.qps_max <= 0:
            raise ValueError(f"qps_max must be positive, got {self.qps_max}")


def _slo_from_args(args) -> Slo:
    if (args.slo_latency_ms is None) == (args.slo_accuracy is None):
        raise ValueError("pass exactly one of --slo-latency-ms / --slo-accuracy")
    if args.slo_latency_ms is not None:
        return Slo.latency(int(round(args.slo_latency_ms * 1000)))
    return Slo.accuracy(args.slo_accuracy)


# -- shared writers (simulate and serve emit identical schemas) ---------------

def write_requests_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arrival_us", "completion_us", "stages_executed"])
        for r in records:
            w.writerow([r.arrival_us, r.completion_us, r.stages_executed])


def write_windows_csv(path, windows) -> None:
    """Per-measurement-window rows from engine WindowRecords."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["end_us", "measured_qps", "gear_index", "completed",
                    "p95_us", "accuracy"])
        for row in windows:
            w.writerow([row.end_us, f"{row.measured_qps:.3f}", row.gear_after,
                        row.completed,
                        "" if row.p95_us is None else row.p95_us,
                        "" if row.accuracy is None else f"{row.accuracy:.6f}"])


def _metrics_doc(plan, *, arrivals, completed, backlogged, p95_us, accuracy,
                 per_range_throughput=None, per_range_time_fraction=None) -> dict:
    n_devices = len({r.device_id for r in plan.placement.replicas})
    return {
        "arrivals": arrivals,
        "completed": completed,
        "backlogged": backlogged,
        "p95_latency_us": p95_us,
        "accuracy": accuracy,
        "n_devices": n_devices,
        "slo": {"kind": plan.slo.kind,
                "latency_target_us": plan.slo.latency_target_us,
                "accuracy_target": plan.slo.accuracy_target},
        "per_range_throughput": per_range_throughput or {},
        "per_range_time_fraction": per_range_time_fraction or {},
    }


def _latency_slo_exit(plan, p95_us) -> int:
    if plan.slo.kind == "latency" and p95_us is not None \
            and p95_us > plan.slo.latency_target_us:
        print(f"latency SLO violated: p95 {p95_us} us > target "
              f"{plan.slo.latency_target_us} us", file=sys.stderr)
        return EXIT_SLO_VIOLATION
    return EXIT_OK


# -- gen-synthetic -------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ratios = tuple(float(x) for x in args.cost_ratios.split(","))
    profiles = synth.make_profiles(
        n_models=args.n_models, cost_ratios=ratios,
        base_runtime_us=args.base_runtime_us,
        base_memory_bytes=int(args.base_memory_gb * 1e9))
    validation = synth.make_validation(
        profiles, n_samples=args.n_samples, easy_fraction=args.easy_fraction,
        seed=args.seed)
    devices = synth.make_devices(args.n_devices,
                                 memory_bytes=int(args.device_memory_gb * 1e9))
    trace = synth.constant_rate_trace(args.trace_qps, args.trace_seconds)
    formats.save_profiles(profiles, out / "profiles.json")
    formats.save_validation(validation, out / "validation.jsonl")
    formats.save_devices(devices, out / "devices.json")
    formats.save_trace(trace, out / "trace.csv")
    for name in ("profiles.json", "validation.jsonl", "devices.json", "trace.csv"):
        print(out / name)
    return EXIT_OK


# -- plan ----------------------------------------------------------------------

def cmd_plan(args) -> int:
    config = ExperimentConfig(
        profiles_path=Path(args.profiles), validation_path=Path(args.validation),
        devices_path=Path(args.devices), trace_path=None,
        slo=_slo_from_args(args), qps_max=args.qps_max, n_ranges=args.n_ranges,
        zipf_s=args.zipf_s, seed=args.seed, out_dir=Path(args.out_dir))
    config.validate()
    config.out_dir.mkdir(parents=True, exist_ok=True)
    profiles = formats.load_profiles(config.profiles_path)
    validation = formats.load_validation(config.validation_path)
    devices = formats.load_devices(config.devices_path)
    dist = zipf_distribution(config.n_ranges, s=config.zipf_s)
    pc = planner.PlannerConfig()
    if args.n_samples is not None:
        pc.n_samples = args.n_samples
    if args.probe_duration_s is not None:
        pc.probe_duration_s = args.probe_duration_s
    if args.probe_warmup_s is not None:
        pc.probe_warmup_s = args.probe_warmup_s

    started = time.monotonic()
    try:
        plan, state = planner.optimize_with_state(
            profiles, devices, validation, dist, config.slo, config.qps_max,
            config.n_ranges, seed=config.seed, config=pc)
    except planner.UserInfeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    wall_s = time.monotonic() - started

    formats.save_plan(plan, config.out_dir / "plan.json")
    with open(config.out_dir / "planning_log.jsonl", "w") as f:
        for entry in state.log:
            f.write(json.dumps(entry) + "\n")
        f.write(json.dumps({
            "summary": True, "wall_s": round(wall_s, 3),
            "submodule_calls": state.counters,
            "total_calls": state.call_index,
            "downgrades": state.downgrades,
            "n_candidates": len(state.candidate_cascades),
        }) + "\n")
    print(config.out_dir / "plan.json")
    print(f"planned in {wall_s:.2f}s; calls {state.counters} "
          f"downgrades {state.downgrades}")
    return EXIT_OK


# -- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles = formats.load_profiles(args.profiles)
    validation = formats.load_validation(args.validation)
    plan = formats.load_plan(args.plan)
    trace = formats.load_trace(args.trace)

    if len(trace) == 0:
        doc = _metrics_doc(plan, arrivals=0, completed=0, backlogged=0,
                           p95_us=None, accuracy=None)
        (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
        write_requests_csv(out / "requests.csv", [])
        write_windows_csv(out / "windows.csv", [])
        print(out / "metrics.json")
        return EXIT_OK

    metrics = engine.run(plan, trace, validation, profiles, seed=args.seed)
    doc = _metrics_doc(
        plan, arrivals=metrics.arrivals, completed=metrics.completed,
        backlogged=metrics.backlogged, p95_us=metrics.p95(),
        accuracy=metrics.accuracy(),
        per_range_throughput={str(k): v for k, v in metrics.per_range_throughput.items()},
        per_range_time_fraction={str(k): v for k, v in metrics.per_range_time_fraction.items()})
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_requests_csv(out / "requests.csv", metrics.per_request)
    write_windows_csv(out / "windows.csv", metrics.windows)
    print(out / "metrics.json")
    return _latency_slo_exit(plan, metrics.p95())


# -- serve -----------------------------------------------------------------------

def cmd_serve(args) -> int:
    profiles = formats.load_profiles(args.profiles)
    validation = formats.load_validation(args.validation)
    plan = formats.load_plan(args.plan)
    trace = formats.load_trace(args.trace)
    devices = formats.load_devices(args.devices)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    config = serving.ServeConfig(
        devices=devices, alpha=args.alpha,
        measure_period_us=int(round(args.measure_period_ms * 1000)),
        seed=args.seed)
    handle = serving.start(plan, profiles, validation, config)
    try:
        if len(trace) > 0:
            serving.replay_trace(handle, trace)
    except KeyboardInterrupt:
        print("interrupted; draining", file=sys.stderr)
    serving.stop(handle, drain=True)

    records = handle.state.request_records
    lats = [r.completion_us - r.arrival_us for r in records]
    p95 = int(engine.percentile(lats, 95)) if lats else None
    acc = (sum(r.correct for r in records) / len(records)) if records else None
    counts = handle.state.snapshot_counts()
    doc = _metrics_doc(plan, arrivals=counts["submitted"],
                       completed=counts["completed"],
                       backlogged=counts["submitted"] - counts["completed"],
                       p95_us=p95, accuracy=acc)
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_requests_csv(out / "requests.csv", records)
    windows_path = Path(args.metrics_out) if args.metrics_out else out / "windows.csv"
    write_windows_csv(windows_path, handle.state.windows)
    serving.write_windows_csv(out / "sliding.csv", serving.metrics(handle))
    print(out / "metrics.json")
    return _latency_slo_exit(plan, p95)


# -- report ----------------------------------------------------------------------

def _load_run(run_dir: Path) -> dict | None:
    path = run_dir / "metrics.json"
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    doc["run"] = run_dir.name
    doc["dir"] = run_dir
    return doc


def cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        doc = _load_run(Path(d))
        if doc is None:
            print(f"skipping {d}: no metrics.json", file=sys.stderr)
            continue
        runs.append(doc)
    if not runs:
        print("no runs to report", file=sys.stderr)
        return EXIT_OK
    runs.sort(key=lambda r: (r["accuracy"] is None,
                             -(r["accuracy"] or 0.0), r["run"]))
    header = f"{'run':<24} {'devices':>7} {'p95_us':>10} {'accuracy':>9}"
    print(header)
    rows = []
    for r in runs:
        p95 = r["p95_latency_us"]
        acc = r["accuracy"]
        print(f"{r['run']:<24} {r['n_devices']:>7} "
              f"{p95 if p95 is not None else '-':>10} "
              f"{f'{acc:.4f}' if acc is not None else '-':>9}")
        rows.append([r["run"], r["n_devices"],
                     "" if p95 is None else p95,
                     "" if acc is None else f"{acc:.6f}"])
        windows = r["dir"] / "windows.csv"
        if windows.exists():
            with open(windows) as f, \
                    open(r["dir"] / "gear_timeline.csv", "w", newline="") as g:
                reader = csv.DictReader(f)
                w = csv.writer(g)
                w.writerow(["end_us", "gear_index"])
                for row in reader:
                    w.writerow([row["end_us"], row["gear_index"]])
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run", "devices", "p95_us", "accuracy"])
            w.writerows(rows)
        print(f"summary written to {args.out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gearserve",
        description="Gear-plan optimization and serving over profiled mock models.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic workload")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n-models", type=int, default=3)
    g.add_argument("--cost-ratios", default="1,4,16",
                   help="comma-separated batch-1 cost ratios, cheapest first")
    g.add_argument("--easy-fraction", type=float, default=0.8)
    g.add_argument("--n-samples", type=int, default=500)
    g.add_argument("--base-runtime-us", type=int, default=2_000)
    g.add_argument("--base-memory-gb", type=float, default=2.0)
    g.add_argument("--n-devices", type=int, default=2)
    g.add_argument("--device-memory-gb", type=float, default=64.0)
    g.add_argument("--trace-qps", type=float, default=50.0)
    g.add_argument("--trace-seconds", type=float, default=30.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("plan", help="optimize a gear plan")
    p.add_argument("--profiles", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--devices", required=True)
    p.add_argument("--slo-latency-ms", type=float)
    p.add_argument("--slo-accuracy", type=float)
    p.add_argument("--qps-max", type=float, required=True)
    p.add_argument("--n-ranges", type=int, default=8)
    p.add_argument("--zipf-s", type=float, default=1.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-samples", type=int, default=None,
                   help="cascade samples per search call")
    p.add_argument("--probe-duration-s", type=float, default=None)
    p.add_argument("--probe-warmup-s", type=float, default=None)
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="virtual-clock simulation of a plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--profiles", required=True)
    s.add_argument("--validation", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("serve", help="wall-clock serving of a trace")
    v.add_argument("--plan", required=True)
    v.add_argument("--profiles", required=True)
    v.add_argument("--validation", required=True)
    v.add_argument("--trace", required=True)
    v.add_argument("--devices", required=True)
    v.add_argument("--alpha", type=float, default=8.0)
    v.add_argument("--measure-period-ms", type=float, default=100.0)
    v.add_argument("--metrics-out", default=None,
                   help="window metrics CSV path (default <out-dir>/windows.csv)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_serve)

    r = sub.add_parser("report", help="summarize run directories")
    r.add_argument("runs", nargs="+", help="run directories with metrics.json")
    r.add_argument("--out", default=None, help="summary CSV path")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
