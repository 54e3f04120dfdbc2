"""Online serving runtime: threads around the simulator's transition rules.

The producer thread closes measurement windows and applies gear switching,
one consumer thread per inference-server partition polls queues and triggers
batches, and one executor thread per device sleeps out the profiled runtime
(mock inference). All of them drive the exact same EngineState transitions
the virtual-clock simulator uses, serialized under a single lock, so trigger
and switching decisions cannot diverge between the two modes. Executors
sleep outside the lock; no lock is ever held across a blocking call, which
keeps submit() effectively non-blocking.

Single process, single logical server by default; partitions split devices
across consumer threads the way a multi-node port would split servers.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass

from . import engine
from .cascades import certainty
from .types import (
    US_PER_S,
    Device,
    GearPlan,
    ProfileSet,
    ValidationSet,
    WorkloadTrace,
)

_SLEEP_SLACK_S = 0.002  # sleep this much short of the target, then spin


def _sleep_until(target_monotonic: float) -> None:
    """Sleep to a monotonic deadline; busy-wait the final stretch so that
    runtimes below the OS sleep resolution still preserve ordering."""
    while True:
        dt = target_monotonic - time.monotonic()
        if dt <= 0:
            return
        if dt > _SLEEP_SLACK_S:
            time.sleep(dt - _SLEEP_SLACK_S)
        # spin for the remainder


@dataclass(frozen=True)
class Request:
    request_id: int
    sample_id: int
    arrival_time: int  # microseconds since server start


@dataclass(frozen=True)
class WindowedMetrics:
    window_us: int  # window end, microseconds since server start
    p95_latency_us: int | None
    accuracy: float | None
    current_gear_index: int
    measured_qps: float


@dataclass
class ServeConfig:
    devices: list[Device]
    alpha: float = 8.0
    measure_period_us: int = 100_000
    poll_period_us: int = 1_000
    window_span_us: int = 5_000_000
    window_stride_us: int = 1_000_000
    partitions: list[list[str]] | None = None  # device ids; default: one server
    auto_drive: bool = True
    seed: int = 0


def mock_execute(model_id: str, batch: list[int], profiles: ProfileSet,
                 validation: ValidationSet) -> list[tuple[float, bool]]:
    """Occupy the caller for the profiled runtime of this batch size, then
    return each sample's recorded certainty and correctness."""
    profile = profiles[model_id]
    if not batch:
        raise ValueError("empty batch")
    if len(batch) > profile.max_profiled_batch:
        raise ValueError(
            f"batch of {len(batch)} exceeds max profiled batch "
            f"{profile.max_profiled_batch} for {model_id}")
    runtime_us = profile.runtime_us(len(batch))
    _sleep_until(time.monotonic() + runtime_us / US_PER_S)
    out = []
    for sample_id in batch:
        rec = validation.records[sample_id % len(validation)]
        output = rec.outputs[model_id]
        out.append((certainty(output.scores), output.correct))
    return out


class ServerHandle:
    """Running server: owns the engine state, the lock, and the threads."""

    def __init__(self, plan: GearPlan, profiles: ProfileSet,
                 validation: ValidationSet, config: ServeConfig):
        self.plan = plan
        self.profiles = profiles
        self.validation = validation
        self.config = config
        self.compiled = engine.CompiledPlan(plan, profiles, validation)
        self.state = engine.EngineState(
            self.compiled,
            engine.EngineConfig(seed=config.seed, alpha=config.alpha,
                                measure_period_us=config.measure_period_us,
                                initial_gear_index=0, enable_ticks=False))
        self.lock = threading.Lock()
        self.accepting = True
        self.running = True
        self._arrival_log: list[int] = []  # submission timestamps, µs
        self._start_monotonic = time.monotonic()
        self.partitions = self._resolve_partitions(config)
        # one work channel + executor thread per device
        self._work: list[queue.Queue] = [queue.Queue() for _ in self.compiled.devices]
        self._threads: list[threading.Thread] = []
        for didx in range(len(self.compiled.devices)):
            t = threading.Thread(target=self._executor_loop, args=(didx,),
                                 name=f"executor-{self.compiled.devices[didx]}",
                                 daemon=True)
            t.start()
            self._threads.append(t)
        if config.auto_drive:
            t = threading.Thread(target=self._producer_loop, name="producer",
                                 daemon=True)
            t.start()
            self._threads.append(t)
            for p in range(len(self.partitions)):
                t = threading.Thread(target=self._consumer_loop, args=(p,),
                                     name=f"consumer-{p}", daemon=True)
                t.start()
                self._threads.append(t)

    def _resolve_partitions(self, config: ServeConfig) -> list[list[int]]:
        device_ids = list(self.compiled.devices)
        if config.partitions is None:
            return [list(range(len(device_ids)))]
        seen: set[str] = set()
        out = []
        for group in config.partitions:
            idxs = []
            for d in group:
                if d not in device_ids:
                    raise ValueError(f"partition names unknown device {d!r}")
                if d in seen:
                    raise ValueError(f"device {d!r} appears in two partitions")
                seen.add(d)
                idxs.append(device_ids.index(d))
            out.append(idxs)
        missing = set(device_ids) - seen
        if missing:
            raise ValueError(f"partitions leave devices unassigned: {sorted(missing)}")
        return out

    # -- clock ----------------------------------------------------------------

    def now_us(self) -> int:
        return int((time.monotonic() - self._start_monotonic) * US_PER_S)

    # -- thread loops ----------------------------------------------------------

    def _producer_loop(self) -> None:
        k = 1
        while True:
            _sleep_until(self._start_monotonic + k * self.config.measure_period_us / US_PER_S)
            if not self.running:
                return
            producer_tick(self)
            k += 1

    def _consumer_loop(self, partition: int) -> None:
        period_s = self.config.poll_period_us / US_PER_S
        while self.running:
            consumer_poll(self, partition)
            time.sleep(period_s)

    def _executor_loop(self, device_idx: int) -> None:
        while True:
            work = self._work[device_idx].get()
            if work is None:
                return
            items, model_id = work
            mock_execute(model_id, [it.row for it in items], self.profiles,
                         self.validation)
            with self.lock:
                # routing re-reads the same validation records the mock
                # executor just returned; both go through certainty()
                self.state.finish_batch(device_idx, items, self.now_us())

    # -- convenience methods delegating to the module-level ops ---------------

    def submit(self, request: Request) -> None:
        submit(self, request)

    def metrics(self) -> list[WindowedMetrics]:
        return metrics(self)

    def snapshot(self) -> dict[str, int]:
        with self.lock:
            return self.state.snapshot_counts()

    def stop(self, drain: bool = True) -> None:
        stop(self, drain=drain)


def start(plan: GearPlan, profiles: ProfileSet, validation: ValidationSet,
          config: ServeConfig) -> ServerHandle:
    """Load the plan and spawn the producer, consumers, and executors.
    Queues start empty and the initial gear is the range containing QPS 0."""
    plan.validate(devices=config.devices, profiles=profiles)
    plan_devices = {r.device_id for r in plan.placement.replicas}
    config_devices = {d.device_id for d in config.devices}
    if not plan_devices <= config_devices:
        raise ValueError(
            f"plan uses devices {sorted(plan_devices - config_devices)} "
            "absent from the serving config")
    return ServerHandle(plan, profiles, validation, config)


def submit(handle: ServerHandle, request: Request) -> None:
    """Enqueue at a first-stage replica weighted by the current gear; returns
    immediately (open loop). Latency is later measured from arrival_time."""
    with handle.lock:
        if not handle.accepting:
            raise RuntimeError("server is stopped; submit rejected")
        handle.state.submit(request.request_id, request.arrival_time,
                            row=request.sample_id % len(handle.validation))
        handle._arrival_log.append(request.arrival_time)


def producer_tick(handle: ServerHandle) -> None:
    """Close one measurement window: compute QPS and apply gear switching."""
    with handle.lock:
        handle.state.tick(handle.now_us())


def consumer_poll(handle: ServerHandle, partition: int) -> None:
    """Dispatch one batch per idle device whose queues meet the trigger rule
    (the simulator's own scan), handing work to that device's executor."""
    part = handle.partitions[partition]
    with handle.lock:
        for didx in part:
            started = handle.state.scan_device(didx, handle.now_us())
            if started is None:
                continue
            ridx, items, _ = started
            model_id = handle.compiled.profiles.model_ids[
                handle.compiled.model_idx_of[ridx]]
            handle._work[didx].put((items, model_id))


def metrics(handle: ServerHandle) -> list[WindowedMetrics]:
    """Sliding-window metrics (5 s span, 1 s stride by default) over all
    completed requests so far, with the gear index active at window end."""
    with handle.lock:
        records = list(handle.state.request_records)
        ticks = list(handle.state.windows)
        arrival_log = list(handle._arrival_log)
        now = handle.now_us()
        initial_gear = handle.state.config.initial_gear_index
    span = handle.config.window_span_us
    stride = handle.config.window_stride_us
    out = []
    end = stride
    while end <= now:
        in_window = [r for r in records if end - span < r.completion_us <= end]
        lats = [r.completion_us - r.arrival_us for r in in_window]
        arrivals = [a for a in arrival_log if end - span < a <= end]
        gear = initial_gear
        for t in ticks:
            if t.end_us <= end:
                gear = t.gear_after
            else:
                break
        out.append(WindowedMetrics(
            window_us=end,
            p95_latency_us=int(engine.percentile(lats, 95)) if lats else None,
            accuracy=(sum(r.correct for r in in_window) / len(in_window))
                     if in_window else None,
            current_gear_index=gear,
            measured_qps=len(arrivals) / (min(span, end) / US_PER_S)))
        end += stride
    return out


def write_windows_csv(path, windows: list[WindowedMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["window_us", "p95_latency_us", "accuracy",
                    "current_gear_index", "measured_qps"])
        for win in windows:
            w.writerow([win.window_us,
                        "" if win.p95_latency_us is None else win.p95_latency_us,
                        "" if win.accuracy is None else f"{win.accuracy:.6f}",
                        win.current_gear_index, f"{win.measured_qps:.3f}"])


def stop(handle: ServerHandle, drain: bool = True) -> None:
    """Stop accepting, optionally flush every queued request (min queue
    lengths drop to 1 so partial batches dispatch), then join the threads."""
    with handle.lock:
        if not handle.running:
            return
        handle.accepting = False
        if drain:
            handle.state.drain_mode = True
    if drain:
        deadline = time.monotonic() + 120.0
        while time.monotonic() < deadline:
            for p in range(len(handle.partitions)):
                consumer_poll(handle, p)
            with handle.lock:
                counts = handle.state.snapshot_counts()
            if counts["completed"] == counts["submitted"]:
                break
            time.sleep(handle.config.poll_period_us / US_PER_S)
        else:
            raise RuntimeError("drain did not finish within 120 s")
    handle.running = False
    for chan in handle._work:
        chan.put(None)
    for t in handle._threads:
        t.join(timeout=10.0)


def replay_trace(handle: ServerHandle, trace: WorkloadTrace,
                 sample_of=None) -> int:
    """Open-loop client: submit each trace arrival at its wall-clock time
    without waiting for responses. Blocks until the last submission; returns
    the number submitted. sample_of maps request_id -> sample_id (default:
    cycle through the validation set)."""
    n_val = len(handle.validation)
    start_mono = handle._start_monotonic
    for i, arrival in enumerate(trace.arrivals):
        arrival = int(arrival)
        _sleep_until(start_mono + arrival / US_PER_S)
        sample = sample_of(i) if sample_of is not None else i % n_val
        submit(handle, Request(request_id=i, sample_id=sample,
                               arrival_time=handle.now_us()))
    return len(trace.arrivals)
