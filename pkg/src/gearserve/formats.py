"""On-disk formats.

profiles.json    {"models": [{"id", "memory_bytes", "runtime_us": {"1": ...}}]}
validation.jsonl one JSON object per line:
                 {"sample_id", "models": {"<id>": {"scores": [...], "correct": bool}}}
trace.csv        one arrival timestamp (integer microseconds) per line
devices.json     [{"id", "memory_capacity_bytes"}]
plan.json        full gear plan, round-trips through load_plan/save_plan
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .types import (
    US_PER_S,
    Cascade,
    Device,
    Gear,
    GearPlan,
    ModelOutput,
    ModelProfile,
    Placement,
    ProfileSet,
    Replica,
    Slo,
    ValidationRecord,
    ValidationSet,
    WorkloadTrace,
)


def _fail(path, msg: str) -> None:
    raise ValueError(f"{path}: {msg}")


def load_profiles(path) -> ProfileSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        _fail(path, f"invalid JSON ({e})")
    if not isinstance(doc, dict) or "models" not in doc:
        _fail(path, "expected an object with a 'models' list")
    models = []
    for entry in doc["models"]:
        try:
            table = {int(b): int(lat) for b, lat in entry["runtime_us"].items()}
            models.append(ModelProfile(
                model_id=entry["id"],
                memory_bytes=int(entry["memory_bytes"]),
                runtime_table=table,
            ))
        except (KeyError, TypeError, ValueError) as e:
            _fail(path, f"bad model entry {entry!r}: {e}")
    try:
        return ProfileSet(models)
    except ValueError as e:
        _fail(path, str(e))


def save_profiles(profiles: ProfileSet, path) -> None:
    doc = {"models": [
        {"id": m.model_id,
         "memory_bytes": m.memory_bytes,
         "runtime_us": {str(b): m.runtime_table[b] for b in m.profiled_batches}}
        for m in profiles
    ]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_validation(path) -> ValidationSet:
    path = Path(path)
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                outputs = {
                    mid: ModelOutput(scores=tuple(float(s) for s in out["scores"]),
                                     correct=bool(out["correct"]))
                    for mid, out in doc["models"].items()
                }
                records.append(ValidationRecord(sample_id=int(doc["sample_id"]),
                                                outputs=outputs))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                _fail(path, f"line {lineno}: {e}")
    try:
        return ValidationSet(records)
    except ValueError as e:
        _fail(path, str(e))


def save_validation(validation: ValidationSet, path) -> None:
    with open(path, "w") as f:
        for r in validation.records:
            doc = {"sample_id": r.sample_id,
                   "models": {mid: {"scores": list(out.scores), "correct": out.correct}
                              for mid, out in r.outputs.items()}}
            f.write(json.dumps(doc) + "\n")


def load_trace(path, scale_to_max_qps: float | None = None) -> WorkloadTrace:
    """Read a trace; optionally rescale it so its busiest second hits
    scale_to_max_qps.

    Scaling multiplies each second's arrival count by
    scale_to_max_qps / max_second_count, rounds, and spreads the new arrivals
    evenly inside their second. Without scaling, arrivals are kept verbatim.
    """
    path = Path(path)
    times = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                times.append(int(line))
            except ValueError:
                _fail(path, f"line {lineno}: not an integer timestamp: {line!r}")
    try:
        trace = WorkloadTrace(np.array(times, dtype=np.int64))
    except ValueError as e:
        _fail(path, str(e))
    if scale_to_max_qps is None:
        return trace
    return scale_trace(trace, scale_to_max_qps)


def scale_trace(trace: WorkloadTrace, target_max_qps: float) -> WorkloadTrace:
    if target_max_qps <= 0:
        raise ValueError(f"target max QPS must be positive, got {target_max_qps}")
    counts = trace.per_second_counts()
    if counts.size == 0 or counts.max() == 0:
        raise ValueError("cannot scale an empty trace")
    factor = target_max_qps / counts.max()
    new_counts = np.rint(counts * factor).astype(np.int64)
    arrivals = []
    for sec, k in enumerate(new_counts):
        base = sec * US_PER_S
        arrivals.extend(base + (np.arange(k, dtype=np.int64) * US_PER_S) // k)
    return WorkloadTrace(np.array(arrivals, dtype=np.int64),
                         duration_us=int(counts.size) * US_PER_S)


def save_trace(trace: WorkloadTrace, path) -> None:
    with open(path, "w") as f:
        for t in trace.arrivals:
            f.write(f"{int(t)}\n")


def load_devices(path) -> list[Device]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        _fail(path, f"invalid JSON ({e})")
    if not isinstance(doc, list):
        _fail(path, "expected a JSON list of devices")
    devices = []
    seen = set()
    for entry in doc:
        try:
            d = Device(device_id=entry["id"],
                       memory_capacity_bytes=int(entry["memory_capacity_bytes"]))
        except (KeyError, TypeError, ValueError) as e:
            _fail(path, f"bad device entry {entry!r}: {e}")
        if d.device_id in seen:
            _fail(path, f"duplicate device id {d.device_id!r}")
        seen.add(d.device_id)
        devices.append(d)
    if not devices:
        _fail(path, "device list is empty")
    return devices


def save_devices(devices: list[Device], path) -> None:
    doc = [{"id": d.device_id, "memory_capacity_bytes": d.memory_capacity_bytes}
           for d in devices]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def plan_to_dict(plan: GearPlan) -> dict:
    slo: dict = {"kind": plan.slo.kind}
    if plan.slo.kind == "latency":
        slo["latency_target_us"] = plan.slo.latency_target_us
    else:
        slo["accuracy_target"] = plan.slo.accuracy_target
    return {
        "qps_max": plan.qps_max,
        "n_ranges": plan.n_ranges,
        "slo": slo,
        "placement": [
            {"replica_id": r.replica_id, "model_id": r.model_id, "device_id": r.device_id}
            for r in plan.placement.replicas
        ],
        "gears": [
            {
                "range_index": i,
                "cascade": {"stages": list(g.cascade.stages),
                            "thresholds": list(g.cascade.thresholds)},
                "min_queue_length": dict(g.min_queue_length),
                "load_weights": {m: dict(per) for m, per in g.load_weights.items()},
            }
            for i, g in enumerate(plan.gears)
        ],
    }


def plan_from_dict(doc: dict, source: str = "plan") -> GearPlan:
    try:
        n_ranges = int(doc["n_ranges"])
        slo_doc = doc["slo"]
        if slo_doc["kind"] == "latency":
            slo = Slo.latency(int(slo_doc["latency_target_us"]))
        elif slo_doc["kind"] == "accuracy":
            slo = Slo.accuracy(float(slo_doc["accuracy_target"]))
        else:
            raise ValueError(f"unknown slo kind {slo_doc.get('kind')!r}")
        placement = Placement([
            Replica(replica_id=e["replica_id"], model_id=e["model_id"],
                    device_id=e["device_id"])
            for e in doc["placement"]
        ])
        gear_entries = doc["gears"]
        if len(gear_entries) != n_ranges:
            raise ValueError(f"n_ranges is {n_ranges} but {len(gear_entries)} gears given")
        by_range: dict[int, Gear] = {}
        for e in gear_entries:
            idx = int(e["range_index"])
            if idx in by_range:
                raise ValueError(f"two gears declared for range {idx}")
            if not 0 <= idx < n_ranges:
                raise ValueError(f"gear range_index {idx} out of [0, {n_ranges})")
            by_range[idx] = Gear(
                cascade=Cascade(stages=tuple(e["cascade"]["stages"]),
                                thresholds=tuple(float(t) for t in e["cascade"]["thresholds"])),
                min_queue_length={rid: int(q) for rid, q in e["min_queue_length"].items()},
                load_weights={m: {rid: float(w) for rid, w in per.items()}
                              for m, per in e["load_weights"].items()},
            )
        gears = tuple(by_range[i] for i in range(n_ranges))
        plan = GearPlan(placement=placement, slo=slo,
                        qps_max=float(doc["qps_max"]), gears=gears)
        plan.validate()
        return plan
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{source}: {e}") from None


def load_plan(path) -> GearPlan:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        _fail(path, f"invalid JSON ({e})")
    return plan_from_dict(doc, source=str(path))


def save_plan(plan: GearPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
