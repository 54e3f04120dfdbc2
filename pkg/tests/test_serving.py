"""Serving runtime tests.

These run real threads against real (but short) mock runtimes; the profiled
latencies in the shared fixtures are a few milliseconds, so whole-suite wall
time stays low. Timing assertions use generous margins; exact latency fidelity
against the simulator is covered by the acceptance tests.
"""

import threading
import time

import numpy as np
import pytest

from gearserve import engine, serving
from gearserve.serving import Request, ServeConfig, mock_execute
from gearserve.types import (
    US_PER_S,
    Cascade,
    Device,
    Gear,
    GearPlan,
    Placement,
    Replica,
    Slo,
    WorkloadTrace,
)

from conftest import tiered_validation, two_devices, two_model_profiles


def _plan(threshold=0.55, qps_max=200.0, n_gears=1, min_q=1):
    pl = Placement([Replica("small@d0", "small", "d0"),
                    Replica("large@d1", "large", "d1")])
    cascade = Cascade(("small", "large"), (threshold,))
    gear = Gear(cascade=cascade,
                min_queue_length={"small@d0": min_q, "large@d1": 1},
                load_weights={"small": {"small@d0": 1.0},
                              "large": {"large@d1": 1.0}})
    return GearPlan(placement=pl, slo=Slo.latency(1_000_000),
                    qps_max=qps_max, gears=(gear,) * n_gears)


def _config(**kw):
    kw.setdefault("devices", two_devices())
    return ServeConfig(**kw)


# -- mock executor ------------------------------------------------------------

def test_mock_execute_takes_profiled_time(profiles, validation):
    t0 = time.monotonic()
    out = mock_execute("small", [0, 1], profiles, validation)
    took = time.monotonic() - t0
    assert 0.008 <= took < 0.05  # batch of 2 -> 8000 us
    assert len(out) == 2
    # sample 0 is easy: small is confident and correct
    cert, correct = out[0]
    assert correct and cert > 0.5


def test_mock_execute_wraps_sample_ids(profiles, validation):
    n = len(validation)
    a = mock_execute("small", [1], profiles, validation)
    b = mock_execute("small", [1 + n], profiles, validation)
    assert a == b


def test_mock_execute_rejects_bad_batches(profiles, validation):
    with pytest.raises(ValueError):
        mock_execute("small", [], profiles, validation)
    with pytest.raises(ValueError):
        mock_execute("small", list(range(5)), profiles, validation)  # cap is 4


# -- lifecycle ----------------------------------------------------------------

def test_start_validates_devices(profiles, validation):
    plan = _plan()
    with pytest.raises(ValueError):
        serving.start(plan, profiles, validation,
                      _config(devices=[Device("d0", 16_000_000_000)]))


def test_submit_complete_drain(profiles, validation):
    handle = serving.start(_plan(), profiles, validation, _config())
    try:
        for i in range(8):
            serving.submit(handle, Request(request_id=i, sample_id=i,
                                           arrival_time=handle.now_us()))
        serving.stop(handle, drain=True)
        counts = handle.snapshot()
        assert counts["submitted"] == 8
        assert counts["completed"] == 8
        assert counts["queued"] == 0
        assert counts["in_flight"] == 0
    finally:
        serving.stop(handle, drain=False)


def test_submit_after_stop_rejected(profiles, validation):
    handle = serving.start(_plan(), profiles, validation, _config())
    serving.stop(handle, drain=True)
    with pytest.raises(RuntimeError):
        serving.submit(handle, Request(0, 0, 0))


def test_stop_is_idempotent(profiles, validation):
    handle = serving.start(_plan(), profiles, validation, _config())
    serving.stop(handle)
    serving.stop(handle)  # no error


def test_server_restartable_after_stop(profiles, validation):
    cfg = _config()
    h1 = serving.start(_plan(), profiles, validation, cfg)
    serving.stop(h1)
    h2 = serving.start(_plan(), profiles, validation, cfg)
    serving.submit(h2, Request(0, 0, h2.now_us()))
    serving.stop(h2)
    assert h2.snapshot()["completed"] == 1


def test_no_request_loss_under_load(profiles, validation):
    handle = serving.start(_plan(), profiles, validation, _config())
    n = 40
    for i in range(n):
        serving.submit(handle, Request(i, i, handle.now_us()))
        if i % 10 == 9:
            snap = handle.snapshot()
            assert snap["submitted"] == snap["completed"] + snap["queued"] + snap["in_flight"]
    serving.stop(handle, drain=True)
    assert handle.snapshot()["completed"] == n


# -- routing ------------------------------------------------------------------

def test_weighted_routing_splits_load(profiles, validation):
    # two small replicas at weights 1:1 -> binomial split, 3 sigma bounds
    pl = Placement([Replica("small@d0", "small", "d0"),
                    Replica("small@d1", "small", "d1")])
    gear = Gear(cascade=Cascade(("small",), ()),
                min_queue_length={"small@d0": 1, "small@d1": 1},
                load_weights={"small": {"small@d0": 1.0, "small@d1": 1.0}})
    plan = GearPlan(placement=pl, slo=Slo.latency(1_000_000), qps_max=200.0,
                    gears=(gear,))
    cfg = _config(auto_drive=False)  # no threads pull work: counts stay exact
    handle = serving.start(plan, profiles, validation, cfg)
    n = 10_000
    for i in range(n):
        serving.submit(handle, Request(i, i, 0))
    counts = handle.state.routing_counts
    sigma = (n * 0.25) ** 0.5
    assert abs(counts["small@d0"] - n / 2) < 3 * sigma
    handle.running = False
    for chan in handle._work:
        chan.put(None)


# -- trigger-rule equivalence -------------------------------------------------

def test_batch_sizes_match_simulator(profiles, validation):
    # same plan, same arrivals: the live consumer and the virtual-clock
    # simulator must form the same batch-size histogram when timing slack
    # cannot change trigger outcomes (min queue 2, paced arrivals)
    plan = _plan(threshold=0.0, min_q=2)
    n = 20
    arr = (np.arange(n, dtype=np.int64) * US_PER_S) // 400
    trace = WorkloadTrace(arr, duration_us=1 * US_PER_S)
    sim = engine.run(plan, trace, validation, profiles)

    handle = serving.start(plan, profiles, validation, _config())
    serving.replay_trace(handle, trace)
    serving.stop(handle, drain=True)
    live = handle.state.per_model_batches["small"]
    # drain may flush a trailing partial batch the simulator left queued;
    # compare total served and the dominant batch size
    assert sum(k * v for k, v in live.items()) == n
    assert max(live) == max(sim.per_model_batches["small"])


def test_gear_switching_live(profiles, validation):
    # two gears, boundary at 100 qps; a fast burst pushes the measured rate
    # over the boundary and the tick switches gears
    plan = _plan(threshold=0.55, qps_max=200.0, n_gears=2)
    cfg = _config(measure_period_us=50_000)
    handle = serving.start(plan, profiles, validation, cfg)
    try:
        for i in range(12):  # 12 in <50 ms -> >= 240 qps measured
            serving.submit(handle, Request(i, 0, handle.now_us()))
        time.sleep(0.12)
        with handle.lock:
            gears = [w.gear_after for w in handle.state.windows]
        assert 1 in gears
    finally:
        serving.stop(handle)


# -- metrics ------------------------------------------------------------------

def test_sliding_windows(profiles, validation):
    cfg = _config(window_span_us=200_000, window_stride_us=100_000)
    handle = serving.start(_plan(), profiles, validation, cfg)
    try:
        for i in range(10):
            serving.submit(handle, Request(i, i, handle.now_us()))
            time.sleep(0.02)
        time.sleep(0.3)
        wins = serving.metrics(handle)
        assert len(wins) >= 3
        assert all(wins[i].window_us < wins[i + 1].window_us
                   for i in range(len(wins) - 1))
        covered = [w for w in wins if w.p95_latency_us is not None]
        assert covered
        assert all(w.accuracy is not None for w in covered)
        total_arrivals = sum(1 for _ in range(10))
        assert any(w.measured_qps > 0 for w in wins)
    finally:
        serving.stop(handle)


def test_windows_csv(tmp_path, profiles, validation):
    wins = [serving.WindowedMetrics(1_000_000, 5_000, 0.9, 0, 10.0),
            serving.WindowedMetrics(2_000_000, None, None, 1, 0.0)]
    path = tmp_path / "sliding.csv"
    serving.write_windows_csv(path, wins)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "window_us,p95_latency_us,accuracy,current_gear_index,measured_qps"
    assert lines[1].startswith("1000000,5000,0.900000,0,")
    assert lines[2].startswith("2000000,,,1,")


def test_partitions(profiles, validation):
    cfg = _config(partitions=[["d0"], ["d1"]])
    handle = serving.start(_plan(), profiles, validation, cfg)
    try:
        assert len(handle.partitions) == 2
        for i in range(6):
            serving.submit(handle, Request(i, i, handle.now_us()))
        serving.stop(handle, drain=True)
        assert handle.snapshot()["completed"] == 6
    finally:
        serving.stop(handle, drain=False)


def test_partition_validation(profiles, validation):
    with pytest.raises(ValueError):
        serving.start(_plan(), profiles, tiered_validation(20),
                      _config(partitions=[["d0"], ["d0", "d1"]]))
    with pytest.raises(ValueError):
        serving.start(_plan(), profiles, tiered_validation(20),
                      _config(partitions=[["d0"]]))
    with pytest.raises(ValueError):
        serving.start(_plan(), profiles, tiered_validation(20),
                      _config(partitions=[["d0"], ["ghost"]]))


def test_replay_trace_paces_submissions(profiles, validation):
    handle = serving.start(_plan(), profiles, validation, _config())
    try:
        arr = np.array([0, 100_000, 200_000], dtype=np.int64)
        t0 = time.monotonic()
        n = serving.replay_trace(handle, WorkloadTrace(arr, duration_us=US_PER_S))
        took = time.monotonic() - t0
        assert n == 3
        assert took >= 0.19  # last submission waits for its arrival time
        with handle.lock:
            log = list(handle._arrival_log)
        assert len(log) == 3
        assert 180_000 <= log[2] <= 300_000
    finally:
        serving.stop(handle)
