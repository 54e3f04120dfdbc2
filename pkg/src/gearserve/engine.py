"""Discrete-event engine for gear-plan execution on profiled mock models.

EngineState holds every queue, device, and gear transition. The virtual-clock
simulator (run) drives it from an event heap; the serving runtime drives the
same object from threads under a lock. Keeping one implementation of the
dispatch/routing/switching rules is what makes the simulator trustworthy as a
planning oracle for the live system.

All times are integer microseconds from run start.
"""

from __future__ import annotations

import heapq
import math
import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .cascades import matrices
from .types import (
    US_PER_S,
    GearPlan,
    ProfileSet,
    QpsDistribution,
    ValidationSet,
    WorkloadTrace,
)

_PRIO_COMPLETE = 0
_PRIO_TICK = 1
_PRIO_ARRIVAL = 2


@dataclass
class EngineConfig:
    seed: int = 0
    measure_period_us: int = 100_000
    alpha: float = 8.0
    initial_gear_index: int = 0
    enable_ticks: bool = True
    record_batches: bool = False


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    arrival_us: int
    completion_us: int
    stages_executed: int
    correct: bool
    gear_index: int


@dataclass(frozen=True)
class WindowRecord:
    """One measurement-period window: the QPS counted in it, the gear decision
    made at its end, and the latency/accuracy of requests completed in it."""

    end_us: int
    measured_qps: float
    first_stage_queue_len: int
    gear_before: int
    candidate_gear: int
    gear_after: int
    observed_range: int
    completed: int
    p95_us: int | None
    accuracy: float | None


@dataclass(frozen=True)
class BatchRecord:
    device_id: str
    replica_id: str
    model_id: str
    start_us: int
    end_us: int
    batch_size: int
    request_ids: tuple[int, ...]


@dataclass
class SimMetrics:
    arrivals: int
    completed: int
    backlogged: int
    latencies_us: np.ndarray
    per_request: list[RequestRecord]
    per_model_batches: dict[str, dict[int, int]]
    per_range_throughput: dict[int, float]
    per_range_time_fraction: dict[int, float]
    windows: list[WindowRecord]
    queue_len_at_horizon: dict[str, int]
    in_flight_at_horizon: int
    batch_log: list[BatchRecord] | None = None

    def p95(self) -> int | None:
        if self.latencies_us.size == 0:
            return None
        return int(percentile(self.latencies_us, 95))

    def accuracy(self) -> float | None:
        if not self.per_request:
            return None
        return sum(1 for r in self.per_request if r.correct) / len(self.per_request)


def percentile(latencies, p: float):
    """Nearest-rank percentile: smallest sample value with at least p percent
    of the sample at or below it."""
    if not 0 < p < 100:
        raise ValueError(f"p must be in (0, 100), got {p}")
    arr = np.sort(np.asarray(latencies))
    if arr.size == 0:
        raise ValueError("percentile of an empty sample")
    k = max(1, math.ceil(p / 100 * arr.size))
    return arr[k - 1]


def maybe_switch_gear(measured_qps: float, first_stage_queue_len: int,
                      current_gear_index: int, plan: GearPlan, alpha: float) -> int:
    """Gear decision with downgrade hysteresis: the plan's gear for the
    measured QPS, except a move to a lower range is held back while
    measured_qps < alpha * first_stage_queue_len (backlog still draining)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    candidate = plan.range_for_qps(measured_qps)
    if candidate < current_gear_index and measured_qps < alpha * first_stage_queue_len:
        return current_gear_index
    return candidate


def estimate_plan_accuracy(plan: GearPlan, dist: QpsDistribution, evals) -> float:
    """Expected serving accuracy: range-weight-weighted mean of each gear's
    cascade accuracy."""
    if dist.n_ranges != plan.n_ranges:
        raise ValueError(f"distribution has {dist.n_ranges} ranges, plan {plan.n_ranges}")
    total = 0.0
    for i, g in enumerate(plan.gears):
        ev = evals.get(g.cascade)
        if ev is None:
            raise ValueError(f"no eval for gear {i} cascade {g.cascade.describe()}")
        total += dist.weights[i] * ev.accuracy
    return total


@dataclass(frozen=True)
class DeviationReport:
    observed: tuple[float, ...]
    assumed: tuple[float, ...]
    total_variation: float
    tolerance: float


def monitor_distribution(observed, assumed: QpsDistribution,
                         tolerance: float = 0.1) -> DeviationReport | None:
    """Compare the observed per-range time fractions against the assumed
    distribution; returns None when they agree within total variation
    distance, else a report carrying both."""
    obs = tuple(float(x) for x in observed)
    if len(obs) != assumed.n_ranges:
        raise ValueError(f"observed has {len(obs)} ranges, assumed {assumed.n_ranges}")
    if abs(sum(obs) - 1.0) > 1e-6:
        raise ValueError(f"observed fractions must sum to 1, got {sum(obs)}")
    tv = 0.5 * sum(abs(o - a) for o, a in zip(obs, assumed.weights))
    if tv <= tolerance:
        return None
    return DeviationReport(observed=obs, assumed=tuple(assumed.weights),
                           total_variation=tv, tolerance=tolerance)


class _CompiledGear:
    __slots__ = ("stage_model_idx", "stage_thresholds", "stage_replica_idx",
                 "stage_cum_weights", "min_qlen")

    def __init__(self, gear, replica_order, replica_index, model_index, n_replicas):
        casc = gear.cascade
        self.stage_model_idx = [model_index[m] for m in casc.stages]
        self.stage_thresholds = list(casc.thresholds) + [None]
        self.stage_replica_idx = []
        self.stage_cum_weights = []
        for m in casc.stages:
            idxs = [replica_index[r.replica_id] for r in replica_order if r.model_id == m]
            weights = np.array([gear.load_weights[m].get(replica_order[i].replica_id, 0.0)
                                for i in idxs])
            self.stage_replica_idx.append(np.array(idxs, dtype=np.int64))
            self.stage_cum_weights.append(np.cumsum(weights))
        self.min_qlen = np.ones(n_replicas, dtype=np.int64)
        for rid, q in gear.min_queue_length.items():
            self.min_qlen[replica_index[rid]] = q


class CompiledPlan:
    """Numeric view of a plan against its profiles and validation set."""

    def __init__(self, plan: GearPlan, profiles: ProfileSet, validation: ValidationSet):
        plan.validate(profiles=profiles)
        missing = {m for g in plan.gears for m in g.cascade.stages} - validation.model_ids
        if missing:
            raise ValueError(f"validation set lacks models {sorted(missing)}")
        self.plan = plan
        self.profiles = profiles
        self.replicas = plan.placement.replicas
        self.replica_index = {r.replica_id: i for i, r in enumerate(self.replicas)}
        self.devices = []
        self.device_index = {}
        for r in self.replicas:
            if r.device_id not in self.device_index:
                self.device_index[r.device_id] = len(self.devices)
                self.devices.append(r.device_id)
        self.device_of = [self.device_index[r.device_id] for r in self.replicas]
        model_index = {m: i for i, m in enumerate(profiles.model_ids)}
        self.model_idx_of = [model_index[r.model_id] for r in self.replicas]
        self.cert, self.corr = matrices(validation, profiles)
        self.n_records = self.cert.shape[0]
        # dense runtime tables: _runtime[model_idx][batch] in µs
        self._runtime = []
        self.max_batch = []
        for m in profiles.model_ids:
            prof = profiles[m]
            cap = prof.max_profiled_batch
            self.max_batch.append(cap)
            self._runtime.append([0] + [prof.runtime_us(b) for b in range(1, cap + 1)])
        self.gears = [_CompiledGear(g, self.replicas, self.replica_index,
                                    model_index, len(self.replicas))
                      for g in plan.gears]

    def runtime_us(self, model_idx: int, batch: int) -> int:
        return self._runtime[model_idx][batch]

    def row_for_request(self, request_id: int) -> int:
        return request_id % self.n_records


def choose_weighted(cum_weights: np.ndarray, rng: np.random.Generator) -> int:
    """Index into a cumulative-weight array, sampled proportionally; uniform
    when all weights are zero."""
    total = cum_weights[-1]
    if total <= 0.0:
        return int(rng.integers(len(cum_weights)))
    x = rng.random() * total
    return int(np.searchsorted(cum_weights, x, side="right").clip(0, len(cum_weights) - 1))


def choose_dispatch(candidates):
    """Pick the queue an idle device serves next, from (stage, queue_len,
    replica_id, replica_idx) tuples: earliest stage, then longest queue, then
    lowest replica id."""
    best = min(candidates, key=lambda c: (c[0], -c[1], c[2]))
    return best[3]


class _Item:
    __slots__ = ("request_id", "row", "stage", "gear_idx", "arrival_us")

    def __init__(self, request_id, row, stage, gear_idx, arrival_us):
        self.request_id = request_id
        self.row = row
        self.stage = stage
        self.gear_idx = gear_idx
        self.arrival_us = arrival_us


class EngineState:
    """All mutable serving state plus the transition rules.

    Not thread-safe by itself: the simulator is single-threaded, and the
    serving runtime serializes every call under its own lock.
    """

    def __init__(self, compiled: CompiledPlan, config: EngineConfig):
        n_gears = len(compiled.gears)
        if not 0 <= config.initial_gear_index < n_gears:
            raise ValueError(f"initial gear {config.initial_gear_index} out of range")
        self.compiled = compiled
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.queues = [deque() for _ in compiled.replicas]
        self.device_busy = [False] * len(compiled.devices)
        self.current_gear = config.initial_gear_index
        self.arrivals = 0
        self.completed = 0
        self.in_flight = 0
        self.request_records: list[RequestRecord] = []
        self.windows: list[WindowRecord] = []
        self.per_model_batches: dict[str, dict[int, int]] = {}
        self.batch_log: list[BatchRecord] | None = [] if config.record_batches else None
        self.routing_counts: dict[str, int] = {}
        self.drain_mode = False  # serving shutdown: flush partial batches
        self._window_arrivals = 0
        self._window_latencies: list[int] = []
        self._window_correct = 0

    # -- transitions ---------------------------------------------------------

    def submit(self, request_id: int, now: int, row: int | None = None) -> int:
        """Enqueue a new request at a first-stage replica of the current gear.
        Returns the device index to re-scan."""
        comp = self.compiled
        if row is None:
            row = comp.row_for_request(request_id)
        item = _Item(request_id, row, 0, self.current_gear, now)
        gear = comp.gears[self.current_gear]
        pos = choose_weighted(gear.stage_cum_weights[0], self.rng)
        ridx = int(gear.stage_replica_idx[0][pos])
        self.queues[ridx].append(item)
        self.arrivals += 1
        self._window_arrivals += 1
        rid = comp.replicas[ridx].replica_id
        self.routing_counts[rid] = self.routing_counts.get(rid, 0) + 1
        return comp.device_of[ridx]

    def _min_qlen(self, replica_idx: int) -> int:
        if self.drain_mode:
            return 1
        return int(self.compiled.gears[self.current_gear].min_qlen[replica_idx])

    def scan_device(self, device_idx: int, now: int):
        """Start one batch on an idle device if any of its queues qualifies.
        Returns (replica_idx, items, runtime_us) or None. The device is
        marked busy; the caller owns scheduling the completion."""
        if self.device_busy[device_idx]:
            return None
        comp = self.compiled
        candidates = []
        for ridx, q in enumerate(self.queues):
            if comp.device_of[ridx] != device_idx or not q:
                continue
            if len(q) >= self._min_qlen(ridx):
                candidates.append((q[0].stage, len(q), comp.replicas[ridx].replica_id, ridx))
        if not candidates:
            return None
        ridx = choose_dispatch(candidates)
        q = self.queues[ridx]
        midx = comp.model_idx_of[ridx]
        size = min(len(q), comp.max_batch[midx])
        items = [q.popleft() for _ in range(size)]
        runtime = comp.runtime_us(midx, size)
        self.device_busy[device_idx] = True
        self.in_flight += len(items)
        model_id = comp.profiles.model_ids[midx]
        hist = self.per_model_batches.setdefault(model_id, {})
        hist[size] = hist.get(size, 0) + 1
        if self.batch_log is not None:
            r = comp.replicas[ridx]
            self.batch_log.append(BatchRecord(
                device_id=r.device_id, replica_id=r.replica_id, model_id=model_id,
                start_us=now, end_us=now + runtime, batch_size=size,
                request_ids=tuple(it.request_id for it in items)))
        return ridx, items, runtime

    def finish_batch(self, device_idx: int, items, now: int) -> set[int]:
        """Apply batch outcomes: complete certain samples, forward the rest.
        Frees the device. Returns the set of device indexes to re-scan."""
        comp = self.compiled
        self.device_busy[device_idx] = False
        self.in_flight -= len(items)
        touched = {device_idx}
        for it in items:
            gear = comp.gears[it.gear_idx]
            midx = gear.stage_model_idx[it.stage]
            thr = gear.stage_thresholds[it.stage]
            last = it.stage == len(gear.stage_model_idx) - 1
            if last or comp.cert[it.row, midx] >= thr:
                correct = bool(comp.corr[it.row, midx])
                rec = RequestRecord(
                    request_id=it.request_id, arrival_us=it.arrival_us,
                    completion_us=now, stages_executed=it.stage + 1,
                    correct=correct, gear_index=it.gear_idx)
                self.request_records.append(rec)
                self.completed += 1
                self._window_latencies.append(now - it.arrival_us)
                self._window_correct += 1 if correct else 0
            else:
                it.stage += 1
                pos = choose_weighted(gear.stage_cum_weights[it.stage], self.rng)
                ridx = int(gear.stage_replica_idx[it.stage][pos])
                self.queues[ridx].append(it)
                touched.add(comp.device_of[ridx])
        return touched

    def first_stage_queue_len(self) -> int:
        gear = self.compiled.gears[self.current_gear]
        return int(sum(len(self.queues[int(r)]) for r in gear.stage_replica_idx[0]))

    def tick(self, now: int) -> WindowRecord:
        """Close the current measurement window: record its metrics and apply
        the gear-switch rule."""
        period_s = self.config.measure_period_us / US_PER_S
        qps = self._window_arrivals / period_s
        q0 = self.first_stage_queue_len()
        before = self.current_gear
        candidate = self.compiled.plan.range_for_qps(qps)
        after = maybe_switch_gear(qps, q0, before, self.compiled.plan, self.config.alpha)
        lat = self._window_latencies
        row = WindowRecord(
            end_us=now, measured_qps=qps, first_stage_queue_len=q0,
            gear_before=before, candidate_gear=candidate, gear_after=after,
            observed_range=candidate, completed=len(lat),
            p95_us=int(percentile(lat, 95)) if lat else None,
            accuracy=(self._window_correct / len(lat)) if lat else None)
        self.windows.append(row)
        self.current_gear = after
        self._window_arrivals = 0
        self._window_latencies = []
        self._window_correct = 0
        return row

    def queue_lengths(self) -> dict[str, int]:
        return {r.replica_id: len(self.queues[i])
                for i, r in enumerate(self.compiled.replicas)}

    def snapshot_counts(self) -> dict[str, int]:
        queued = sum(len(q) for q in self.queues)
        return {"submitted": self.arrivals, "completed": self.completed,
                "in_flight": self.in_flight, "queued": queued}


def _collect_metrics(state: EngineState) -> SimMetrics:
    windows = state.windows
    range_windows: dict[int, int] = {}
    range_completed: dict[int, int] = {}
    for w in windows:
        range_windows[w.observed_range] = range_windows.get(w.observed_range, 0) + 1
        range_completed[w.observed_range] = range_completed.get(w.observed_range, 0) + w.completed
    period_s = state.config.measure_period_us / US_PER_S
    throughput = {r: range_completed[r] / (n * period_s)
                  for r, n in range_windows.items()}
    total_w = sum(range_windows.values())
    fractions = {r: n / total_w for r, n in range_windows.items()} if total_w else {}
    lat = np.array([r.completion_us - r.arrival_us for r in state.request_records],
                   dtype=np.int64)
    return SimMetrics(
        arrivals=state.arrivals,
        completed=state.completed,
        backlogged=state.arrivals - state.completed,
        latencies_us=lat,
        per_request=list(state.request_records),
        per_model_batches={m: dict(h) for m, h in state.per_model_batches.items()},
        per_range_throughput=throughput,
        per_range_time_fraction=fractions,
        windows=list(windows),
        queue_len_at_horizon=state.queue_lengths(),
        in_flight_at_horizon=state.in_flight,
        batch_log=list(state.batch_log) if state.batch_log is not None else None,
    )


def run(plan: GearPlan, trace: WorkloadTrace, validation: ValidationSet,
        profiles: ProfileSet, clock_mode: str = "virtual", seed: int | None = None,
        config: EngineConfig | None = None) -> SimMetrics:
    """Simulate a plan against a trace.

    Virtual mode processes events instantly and is bit-identical across runs
    for equal inputs and seed. Wall mode paces the identical event sequence
    against real time (single-threaded; the threaded serving runtime lives in
    serving.py). Events after the trace horizon are not processed: whatever is
    still queued or in flight counts as backlogged.
    """
    if clock_mode not in ("virtual", "wall"):
        raise ValueError(f"clock_mode must be 'virtual' or 'wall', got {clock_mode!r}")
    if len(trace) == 0:
        raise ValueError("trace is empty")
    cfg = config or EngineConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    compiled = CompiledPlan(plan, profiles, validation)
    state = EngineState(compiled, cfg)
    horizon = trace.duration_us

    heap: list[tuple[int, int, int, str, object]] = []
    seq = 0
    if cfg.enable_ticks:
        t = cfg.measure_period_us
        while t <= horizon:
            heapq.heappush(heap, (t, _PRIO_TICK, seq, "tick", None))
            seq += 1
            t += cfg.measure_period_us
    arrivals = trace.arrivals
    next_arrival = 0
    if len(arrivals):
        heapq.heappush(heap, (int(arrivals[0]), _PRIO_ARRIVAL, seq, "arrival", 0))
        seq += 1
        next_arrival = 1

    wall_start = time.perf_counter() if clock_mode == "wall" else 0.0
    while heap:
        t, _, _, kind, arg = heapq.heappop(heap)
        if t > horizon:
            break
        if clock_mode == "wall":
            delay = wall_start + t / US_PER_S - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        if kind == "arrival":
            rid = arg
            touched = {state.submit(rid, t)}
            if next_arrival < len(arrivals):
                heapq.heappush(heap, (int(arrivals[next_arrival]), _PRIO_ARRIVAL,
                                      seq, "arrival", next_arrival))
                seq += 1
                next_arrival += 1
        elif kind == "complete":
            device_idx, items = arg
            touched = state.finish_batch(device_idx, items, t)
        else:
            state.tick(t)
            # a gear switch can lower queue thresholds, so re-check everything
            touched = set(range(len(compiled.devices)))
        for d in sorted(touched):
            started = state.scan_device(d, t)
            if started is not None:
                ridx, items, runtime = started
                heapq.heappush(heap, (t + runtime, _PRIO_COMPLETE, seq,
                                      "complete", (compiled.device_of[ridx], items)))
                seq += 1
    return _collect_metrics(state)
