"""Core domain types: profiled models, cascades, placements, gears, gear plans.

Everything downstream (planner, simulator, serving runtime) operates on these
types. Time is integer microseconds throughout so that simulation results are
exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

US_PER_S = 1_000_000


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class ModelProfile:
    """Offline profile of one model: memory footprint and batch latency table.

    runtime_table maps batch size -> total latency for that batch in integer
    microseconds. Batch size 1 must be present. Total latency must be
    non-decreasing and per-sample latency non-increasing in batch size.
    """

    model_id: str
    memory_bytes: int
    runtime_table: dict[int, int]

    def __post_init__(self) -> None:
        _require(isinstance(self.model_id, str) and self.model_id != "",
                 "model_id must be a non-empty string")
        _require(isinstance(self.memory_bytes, int) and self.memory_bytes > 0,
                 f"{self.model_id}: memory_bytes must be a positive integer")
        _require(len(self.runtime_table) > 0,
                 f"{self.model_id}: runtime_table is empty")
        for b, lat in self.runtime_table.items():
            _require(isinstance(b, int) and b >= 1,
                     f"{self.model_id}: batch sizes must be integers >= 1, got {b!r}")
            _require(isinstance(lat, int) and lat > 0,
                     f"{self.model_id}: latency for batch {b} must be a positive integer, got {lat!r}")
        _require(1 in self.runtime_table,
                 f"{self.model_id}: runtime_table must include batch size 1")
        batches = sorted(self.runtime_table)
        for prev, cur in zip(batches, batches[1:]):
            lp, lc = self.runtime_table[prev], self.runtime_table[cur]
            _require(lc >= lp,
                     f"{self.model_id}: total latency decreases from batch {prev} to {cur}")
            # per-sample non-increasing: lc/cur <= lp/prev, checked in integers
            _require(lc * prev <= lp * cur,
                     f"{self.model_id}: per-sample latency increases from batch {prev} to {cur}")
        object.__setattr__(self, "_batches", tuple(batches))
        object.__setattr__(self, "_latencies",
                           tuple(self.runtime_table[b] for b in batches))

    @property
    def profiled_batches(self) -> tuple[int, ...]:
        return self._batches  # type: ignore[attr-defined]

    @property
    def max_profiled_batch(self) -> int:
        return self._batches[-1]  # type: ignore[attr-defined]

    def runtime_us(self, batch: int) -> int:
        """Total latency of a batch, exact at profiled sizes, linearly
        interpolated between them. Batches above the profiled maximum are an
        error, never an extrapolation."""
        _require(isinstance(batch, int) and batch >= 1,
                 f"{self.model_id}: batch must be an integer >= 1, got {batch!r}")
        lat = self.runtime_table.get(batch)
        if lat is not None:
            return lat
        batches = self._batches  # type: ignore[attr-defined]
        if batch > batches[-1]:
            raise ValueError(
                f"{self.model_id}: batch {batch} exceeds max profiled batch {batches[-1]}")
        # batch 1 is always profiled, so an unprofiled batch lies strictly inside
        lats = self._latencies  # type: ignore[attr-defined]
        hi = 0
        while batches[hi] < batch:
            hi += 1
        lo = hi - 1
        b0, b1 = batches[lo], batches[hi]
        l0, l1 = lats[lo], lats[hi]
        return int(round(l0 + (l1 - l0) * (batch - b0) / (b1 - b0)))

    def per_sample_us(self, batch: int) -> float:
        return self.runtime_us(batch) / batch


class ProfileSet:
    """Ordered collection of model profiles; insertion order is the canonical
    model order used for matrix layouts and deterministic iteration."""

    def __init__(self, models: list[ModelProfile]):
        seen: dict[str, ModelProfile] = {}
        for m in models:
            _require(m.model_id not in seen, f"duplicate model id {m.model_id!r}")
            seen[m.model_id] = m
        _require(len(seen) > 0, "profile set is empty")
        self._models = seen
        self._order = tuple(seen)
        self._index = {mid: i for i, mid in enumerate(self._order)}

    @property
    def model_ids(self) -> tuple[str, ...]:
        return self._order

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._models

    def __getitem__(self, model_id: str) -> ModelProfile:
        try:
            return self._models[model_id]
        except KeyError:
            raise KeyError(f"unknown model id {model_id!r}") from None

    def __iter__(self):
        return iter(self._models.values())

    def index(self, model_id: str) -> int:
        return self._index[model_id]

    def runtime_us(self, model_id: str, batch: int) -> int:
        return self[model_id].runtime_us(batch)

    def __eq__(self, other) -> bool:
        return isinstance(other, ProfileSet) and self._models == other._models

    def __repr__(self) -> str:
        return f"ProfileSet({list(self._order)!r})"


@dataclass(frozen=True)
class ModelOutput:
    """Recorded output of one model on one validation sample."""

    scores: tuple[float, ...]
    correct: bool

    def __post_init__(self) -> None:
        _require(len(self.scores) >= 1, "scores must be non-empty")


@dataclass(frozen=True)
class ValidationRecord:
    sample_id: int
    outputs: dict[str, ModelOutput]


class ValidationSet:
    """Recorded validation outputs for every model on a shared sample set.

    All records must cover the same model ids. The set caches the derived
    certainty/correctness matrices per model ordering (see cascades.matrices).
    """

    def __init__(self, records: list[ValidationRecord]):
        _require(len(records) > 0, "validation set is empty")
        ids = set()
        model_keys = frozenset(records[0].outputs)
        _require(len(model_keys) > 0, "validation records cover no models")
        for r in records:
            _require(isinstance(r.sample_id, int) and r.sample_id >= 0,
                     f"sample_id must be a non-negative integer, got {r.sample_id!r}")
            _require(r.sample_id not in ids, f"duplicate sample_id {r.sample_id}")
            ids.add(r.sample_id)
            _require(frozenset(r.outputs) == model_keys,
                     f"sample {r.sample_id} covers models {sorted(r.outputs)}, "
                     f"expected {sorted(model_keys)}")
        self.records = list(records)
        self.model_ids = model_keys
        self._matrix_cache: dict[tuple[str, ...], tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, ValidationSet) and self.records == other.records


@dataclass(frozen=True)
class Cascade:
    """Ordered chain of models, cheap to expensive. A sample stops at stage i
    when its certainty there reaches thresholds[i]; the final stage always
    stops, so thresholds has one entry per non-final stage."""

    stages: tuple[str, ...]
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        _require(len(self.stages) >= 1, "cascade must have at least one stage")
        _require(len(set(self.stages)) == len(self.stages),
                 f"cascade repeats a model: {self.stages}")
        _require(len(self.thresholds) == len(self.stages) - 1,
                 f"cascade with {len(self.stages)} stages needs "
                 f"{len(self.stages) - 1} thresholds, got {len(self.thresholds)}")
        for t in self.thresholds:
            _require(t >= 0.0, f"thresholds must be >= 0, got {t}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def describe(self) -> str:
        parts = []
        for i, m in enumerate(self.stages):
            if i < len(self.thresholds):
                parts.append(f"{m}(>{self.thresholds[i]:g})")
            else:
                parts.append(m)
        return " -> ".join(parts)


@dataclass(frozen=True)
class Device:
    device_id: str
    memory_capacity_bytes: int

    def __post_init__(self) -> None:
        _require(isinstance(self.device_id, str) and self.device_id != "",
                 "device_id must be a non-empty string")
        _require(self.memory_capacity_bytes > 0,
                 f"{self.device_id}: memory_capacity_bytes must be positive")


def replica_id_for(model_id: str, device_id: str) -> str:
    return f"{model_id}@{device_id}"


@dataclass(frozen=True)
class Replica:
    replica_id: str
    model_id: str
    device_id: str


class Placement:
    """A set of model replicas on devices, at most one replica of a model per
    device (more buys nothing: batches on one device serialize anyway)."""

    def __init__(self, replicas: list[Replica] | tuple[Replica, ...]):
        by_id: dict[str, Replica] = {}
        pairs = set()
        for r in replicas:
            _require(r.replica_id not in by_id, f"duplicate replica id {r.replica_id!r}")
            key = (r.model_id, r.device_id)
            _require(key not in pairs,
                     f"model {r.model_id!r} placed twice on device {r.device_id!r}")
            by_id[r.replica_id] = r
            pairs.add(key)
        self.replicas = tuple(by_id.values())
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self.replicas)

    def __contains__(self, replica_id: str) -> bool:
        return replica_id in self._by_id

    def __getitem__(self, replica_id: str) -> Replica:
        return self._by_id[replica_id]

    def replicas_of(self, model_id: str) -> tuple[Replica, ...]:
        return tuple(r for r in self.replicas if r.model_id == model_id)

    def on_device(self, device_id: str) -> tuple[Replica, ...]:
        return tuple(r for r in self.replicas if r.device_id == device_id)

    def model_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.replicas:
            counts[r.model_id] = counts.get(r.model_id, 0) + 1
        return counts

    def memory_used(self, profiles: ProfileSet) -> dict[str, int]:
        used: dict[str, int] = {}
        for r in self.replicas:
            used[r.device_id] = used.get(r.device_id, 0) + profiles[r.model_id].memory_bytes
        return used

    def overallocation(self, devices: list[Device], profiles: ProfileSet) -> dict[str, int]:
        """Bytes over capacity per device (0 when it fits)."""
        used = self.memory_used(profiles)
        return {d.device_id: max(0, used.get(d.device_id, 0) - d.memory_capacity_bytes)
                for d in devices}

    def fits(self, devices: list[Device], profiles: ProfileSet) -> bool:
        return all(v == 0 for v in self.overallocation(devices, profiles).values())

    def without(self, replica_id: str) -> "Placement":
        _require(replica_id in self._by_id, f"unknown replica {replica_id!r}")
        return Placement([r for r in self.replicas if r.replica_id != replica_id])

    def signature(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_id))

    def __eq__(self, other) -> bool:
        return isinstance(other, Placement) and set(self.replicas) == set(other.replicas)

    def __repr__(self) -> str:
        return f"Placement({len(self.replicas)} replicas)"


@dataclass(frozen=True)
class Gear:
    """One operating point: a cascade, per-replica batching thresholds, and the
    per-model split of load across replicas (in queries per second)."""

    cascade: Cascade
    min_queue_length: dict[str, int]
    load_weights: dict[str, dict[str, float]]

    def __post_init__(self) -> None:
        for rid, q in self.min_queue_length.items():
            _require(isinstance(q, int) and q >= 1,
                     f"min_queue_length[{rid!r}] must be an integer >= 1, got {q!r}")
        for mid, per_replica in self.load_weights.items():
            _require(mid in self.cascade.stages,
                     f"load_weights covers {mid!r}, which is not in the cascade")
            for rid, w in per_replica.items():
                _require(w >= 0.0, f"load weight for {rid!r} must be >= 0, got {w}")

    def validate_against(self, placement: Placement) -> None:
        """Check coverage invariants that need the placement: every cascade
        model has weighted replicas, and every referenced replica exists."""
        for mid in self.cascade.stages:
            per_replica = self.load_weights.get(mid)
            _require(per_replica is not None and len(per_replica) > 0,
                     f"no load weights for cascade model {mid!r}")
            have = {r.replica_id for r in placement.replicas_of(mid)}
            _require(set(per_replica) == have,
                     f"load weights for {mid!r} cover {sorted(per_replica)}, "
                     f"placement has {sorted(have)}")
        for rid in self.min_queue_length:
            _require(rid in placement, f"min_queue_length names unknown replica {rid!r}")


@dataclass(frozen=True)
class Slo:
    """Service level objective: either a latency bound (p95, microseconds) or
    an accuracy floor, never both."""

    kind: str
    latency_target_us: int | None = None
    accuracy_target: float | None = None

    def __post_init__(self) -> None:
        _require(self.kind in ("latency", "accuracy"),
                 f"slo kind must be 'latency' or 'accuracy', got {self.kind!r}")
        if self.kind == "latency":
            _require(isinstance(self.latency_target_us, int) and self.latency_target_us > 0,
                     "latency slo needs a positive integer latency_target_us")
            _require(self.accuracy_target is None,
                     "latency slo must not carry accuracy_target")
        else:
            _require(self.accuracy_target is not None and 0.0 < self.accuracy_target <= 1.0,
                     "accuracy slo needs accuracy_target in (0, 1]")
            _require(self.latency_target_us is None,
                     "accuracy slo must not carry latency_target_us")

    @classmethod
    def latency(cls, target_us: int) -> "Slo":
        return cls(kind="latency", latency_target_us=target_us)

    @classmethod
    def accuracy(cls, target: float) -> "Slo":
        return cls(kind="accuracy", accuracy_target=target)


@dataclass(frozen=True)
class GearPlan:
    """Placement plus one gear per QPS range. Range i covers
    [i*qps_max/n, (i+1)*qps_max/n); measured QPS at or above qps_max clamps to
    the top range."""

    placement: Placement
    slo: Slo
    qps_max: float
    gears: tuple[Gear, ...]

    def __post_init__(self) -> None:
        _require(self.qps_max > 0, f"qps_max must be positive, got {self.qps_max}")
        _require(len(self.gears) >= 1, "plan needs at least one gear")

    @property
    def n_ranges(self) -> int:
        return len(self.gears)

    def range_bounds(self, i: int) -> tuple[float, float]:
        _require(0 <= i < self.n_ranges, f"range index {i} out of [0, {self.n_ranges})")
        width = self.qps_max / self.n_ranges
        return (i * width, (i + 1) * width)

    def top_qps(self, i: int) -> float:
        return self.range_bounds(i)[1]

    def range_for_qps(self, qps: float) -> int:
        _require(qps >= 0, f"qps must be >= 0, got {qps}")
        i = int(math.floor(qps * self.n_ranges / self.qps_max))
        return min(i, self.n_ranges - 1)

    def validate(self, devices: list[Device] | None = None,
                 profiles: ProfileSet | None = None) -> None:
        for g in self.gears:
            g.validate_against(self.placement)
            if profiles is not None:
                for mid in g.cascade.stages:
                    _require(mid in profiles, f"cascade references unprofiled model {mid!r}")
        if profiles is not None:
            for r in self.placement.replicas:
                _require(r.model_id in profiles,
                         f"replica {r.replica_id!r} references unprofiled model {r.model_id!r}")
        if devices is not None and profiles is not None:
            over = self.placement.overallocation(devices, profiles)
            bad = {d: v for d, v in over.items() if v > 0}
            _require(not bad, f"placement exceeds device memory: {bad}")
            known = {d.device_id for d in devices}
            for r in self.placement.replicas:
                _require(r.device_id in known,
                         f"replica {r.replica_id!r} on unknown device {r.device_id!r}")


class WorkloadTrace:
    """Request arrival times in integer microseconds, non-decreasing. The
    horizon (duration_us) is the end of the last second that contains an
    arrival, so a trace always spans whole seconds."""

    def __init__(self, arrivals: np.ndarray, duration_us: int | None = None):
        arrivals = np.asarray(arrivals, dtype=np.int64)
        if arrivals.size:
            _require(int(arrivals.min()) >= 0, "arrival times must be >= 0")
            _require(bool(np.all(np.diff(arrivals) >= 0)),
                     "arrival times must be non-decreasing")
        if duration_us is None:
            duration_us = 0 if arrivals.size == 0 else \
                (int(arrivals[-1]) // US_PER_S + 1) * US_PER_S
        else:
            _require(arrivals.size == 0 or int(arrivals[-1]) < duration_us,
                     "duration_us must exceed the last arrival")
        self.arrivals = arrivals
        self.duration_us = int(duration_us)

    def __len__(self) -> int:
        return int(self.arrivals.size)

    def per_second_counts(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        seconds = self.arrivals // US_PER_S
        return np.bincount(seconds, minlength=self.duration_us // US_PER_S)

    def max_qps(self) -> float:
        counts = self.per_second_counts()
        return float(counts.max()) if counts.size else 0.0

    def __eq__(self, other) -> bool:
        return (isinstance(other, WorkloadTrace)
                and self.duration_us == other.duration_us
                and np.array_equal(self.arrivals, other.arrivals))


@dataclass(frozen=True)
class QpsDistribution:
    """Probability mass over the QPS ranges of a plan (weights sum to 1)."""

    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        _require(len(self.weights) >= 1, "distribution needs at least one range")
        for w in self.weights:
            _require(w >= 0.0, f"weights must be >= 0, got {w}")
        total = sum(self.weights)
        _require(abs(total - 1.0) < 1e-9, f"weights must sum to 1, got {total}")

    @property
    def n_ranges(self) -> int:
        return len(self.weights)


def zipf_distribution(n_ranges: int, s: float = 1.1) -> QpsDistribution:
    """Zipf weights over ranges: weight_i proportional to 1/(i+1)^s, so low-QPS
    ranges carry most of the operating time."""
    _require(n_ranges >= 1, "n_ranges must be >= 1")
    raw = np.array([1.0 / (i + 1) ** s for i in range(n_ranges)])
    w = raw / raw.sum()
    return QpsDistribution(weights=tuple(float(x) for x in w))
