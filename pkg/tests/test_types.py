import numpy as np
import pytest

from gearserve.types import (
    US_PER_S,
    Cascade,
    Device,
    Gear,
    GearPlan,
    ModelOutput,
    ModelProfile,
    Placement,
    ProfileSet,
    QpsDistribution,
    Replica,
    Slo,
    ValidationRecord,
    ValidationSet,
    WorkloadTrace,
    replica_id_for,
    zipf_distribution,
)


def test_profile_interpolates_between_batches():
    p = ModelProfile("m", 1, {1: 1000, 4: 4000})
    assert p.runtime_us(1) == 1000
    assert p.runtime_us(4) == 4000
    assert p.runtime_us(2) == 2000
    assert p.runtime_us(3) == 3000


def test_profile_rejects_batch_beyond_profile():
    p = ModelProfile("m", 1, {1: 1000, 4: 4000})
    with pytest.raises(ValueError):
        p.runtime_us(5)
    with pytest.raises(ValueError):
        p.runtime_us(0)


def test_profile_requires_batch_one():
    with pytest.raises(ValueError):
        ModelProfile("m", 1, {2: 1000})


def test_profile_rejects_decreasing_total_latency():
    with pytest.raises(ValueError):
        ModelProfile("m", 1, {1: 1000, 2: 900})


def test_profile_rejects_increasing_per_sample_latency():
    # 2 at 2500 means 1250 per sample, worse than batch 1's 1000
    with pytest.raises(ValueError):
        ModelProfile("m", 1, {1: 1000, 2: 2500})
    # equality is allowed (linear batching)
    ModelProfile("m", 1, {1: 1000, 2: 2000})


def test_profile_set_lookup_and_order():
    ps = ProfileSet([ModelProfile("b", 1, {1: 10}), ModelProfile("a", 1, {1: 20})])
    assert ps.model_ids == ("b", "a")  # insertion order, not sorted
    assert ps.index("a") == 1
    assert "a" in ps and "zz" not in ps
    with pytest.raises(KeyError):
        ps["zz"]


def test_profile_set_rejects_duplicates():
    with pytest.raises(ValueError):
        ProfileSet([ModelProfile("a", 1, {1: 10}), ModelProfile("a", 1, {1: 20})])


def test_cascade_validation():
    Cascade(stages=("a", "b"), thresholds=(0.5,))
    with pytest.raises(ValueError):
        Cascade(stages=("a", "a"), thresholds=(0.5,))
    with pytest.raises(ValueError):
        Cascade(stages=("a", "b"), thresholds=())
    with pytest.raises(ValueError):
        Cascade(stages=("a", "b"), thresholds=(-0.1,))
    with pytest.raises(ValueError):
        Cascade(stages=(), thresholds=())


def test_placement_basics():
    reps = [Replica(replica_id_for(m, d), m, d)
            for m in ("a", "b") for d in ("d0", "d1")]
    pl = Placement(reps)
    assert len(pl) == 4
    assert {r.replica_id for r in pl.replicas_of("a")} == {"a@d0", "a@d1"}
    assert {r.replica_id for r in pl.on_device("d0")} == {"a@d0", "b@d0"}
    assert pl.model_counts() == {"a": 2, "b": 2}
    smaller = pl.without("a@d0")
    assert len(smaller) == 3 and "a@d0" not in smaller
    assert len(pl) == 4  # original untouched


def test_placement_rejects_duplicate_model_device():
    with pytest.raises(ValueError):
        Placement([Replica("x", "a", "d0"), Replica("y", "a", "d0")])


def test_placement_memory_accounting():
    ps = ProfileSet([ModelProfile("a", 6, {1: 10}), ModelProfile("b", 5, {1: 10})])
    devices = [Device("d0", 10), Device("d1", 12)]
    pl = Placement([Replica("a@d0", "a", "d0"), Replica("b@d0", "b", "d0"),
                    Replica("b@d1", "b", "d1")])
    assert pl.memory_used(ps) == {"d0": 11, "d1": 5}
    over = pl.overallocation(devices, ps)
    assert over["d0"] == 1 and over["d1"] == 0  # clamped at zero when it fits
    assert not pl.fits(devices, ps)
    assert pl.without("b@d0").fits(devices, ps)


def test_gear_requires_full_replica_coverage():
    pl = Placement([Replica("a@d0", "a", "d0"), Replica("b@d0", "b", "d0")])
    cascade = Cascade(("a", "b"), (0.5,))
    good = Gear(cascade=cascade,
                min_queue_length={"a@d0": 2, "b@d0": 1},
                load_weights={"a": {"a@d0": 1.0}, "b": {"b@d0": 1.0}})
    good.validate_against(pl)
    missing = Gear(cascade=cascade, min_queue_length={},
                   load_weights={"a": {"a@d0": 1.0}})
    with pytest.raises(ValueError):
        missing.validate_against(pl)


def test_gear_rejects_bad_values():
    cascade = Cascade(("a",), ())
    with pytest.raises(ValueError):
        Gear(cascade=cascade, min_queue_length={"a@d0": 0},
             load_weights={"a": {"a@d0": 1.0}})
    with pytest.raises(ValueError):
        Gear(cascade=cascade, min_queue_length={"a@d0": 1},
             load_weights={"other": {"x": 1.0}})


def _plan(n_ranges=4, qps_max=100.0):
    pl = Placement([Replica("a@d0", "a", "d0")])
    cascade = Cascade(("a",), ())
    gear = Gear(cascade=cascade, min_queue_length={"a@d0": 1},
                load_weights={"a": {"a@d0": 1.0}})
    return GearPlan(placement=pl, slo=Slo.latency(100_000), qps_max=qps_max,
                    gears=tuple(gear for _ in range(n_ranges)))


def test_plan_range_for_qps():
    plan = _plan(n_ranges=4, qps_max=100.0)
    assert plan.range_for_qps(0.0) == 0
    assert plan.range_for_qps(24.9) == 0
    assert plan.range_for_qps(25.0) == 1
    assert plan.range_for_qps(99.9) == 3
    assert plan.range_for_qps(100.0) == 3  # clamped at the top range
    assert plan.range_for_qps(500.0) == 3


def test_plan_range_bounds():
    plan = _plan(n_ranges=4, qps_max=100.0)
    assert plan.range_bounds(0) == (0.0, 25.0)
    assert plan.range_bounds(3) == (75.0, 100.0)
    assert plan.top_qps(1) == 50.0


def test_slo_exclusive_fields():
    s = Slo.latency(50_000)
    assert s.kind == "latency" and s.latency_target_us == 50_000
    a = Slo.accuracy(0.9)
    assert a.kind == "accuracy" and a.accuracy_target == 0.9
    with pytest.raises(ValueError):
        Slo(kind="latency", latency_target_us=None)
    with pytest.raises(ValueError):
        Slo(kind="accuracy", accuracy_target=1.5)
    with pytest.raises(ValueError):
        Slo(kind="other")


def test_trace_invariants():
    t = WorkloadTrace(np.array([0, 10, 10, 2_500_000], dtype=np.int64))
    assert t.duration_us == 3 * US_PER_S
    assert list(t.per_second_counts()) == [3, 0, 1]
    assert t.max_qps() == 3
    with pytest.raises(ValueError):
        WorkloadTrace(np.array([5, 3], dtype=np.int64))
    with pytest.raises(ValueError):
        WorkloadTrace(np.array([-1], dtype=np.int64))


def test_validation_set_checks():
    rec = ValidationRecord(0, {"m": ModelOutput((0.9,), True)})
    with pytest.raises(ValueError):
        ValidationSet([])
    with pytest.raises(ValueError):
        ValidationSet([rec, ValidationRecord(0, {"m": ModelOutput((0.1,), False)})])
    with pytest.raises(ValueError):
        ValidationSet([rec, ValidationRecord(1, {"other": ModelOutput((0.1,), False)})])


def test_qps_distribution():
    d = QpsDistribution(weights=(0.25, 0.25, 0.5))
    assert d.n_ranges == 3
    with pytest.raises(ValueError):
        QpsDistribution(weights=(0.5, 0.6))
    with pytest.raises(ValueError):
        QpsDistribution(weights=())


def test_zipf_distribution_shape():
    d = zipf_distribution(4, s=1.1)
    assert d.n_ranges == 4
    assert abs(sum(d.weights) - 1.0) < 1e-12
    # monotone decreasing in range index
    assert all(a > b for a, b in zip(d.weights, d.weights[1:]))
    # ratio follows 1/(i+1)^s
    assert d.weights[0] / d.weights[1] == pytest.approx(2 ** 1.1)
