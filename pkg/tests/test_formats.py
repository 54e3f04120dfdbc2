import json

import numpy as np
import pytest

from gearserve import formats
from gearserve.types import (
    Cascade,
    Device,
    Gear,
    GearPlan,
    Placement,
    Replica,
    Slo,
    WorkloadTrace,
)

from conftest import tiered_validation, two_model_profiles


def test_profiles_round_trip(tmp_path):
    ps = two_model_profiles()
    path = tmp_path / "profiles.json"
    formats.save_profiles(ps, path)
    back = formats.load_profiles(path)
    assert back == ps
    assert back["small"].runtime_table == {1: 5_000, 2: 8_000, 4: 12_000}


def test_profiles_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"models": [{"id": "m"}]}))
    with pytest.raises(ValueError) as e:
        formats.load_profiles(path)
    assert "bad.json" in str(e.value)
    path.write_text("not json")
    with pytest.raises(ValueError):
        formats.load_profiles(path)


def test_validation_round_trip(tmp_path):
    v = tiered_validation(20)
    path = tmp_path / "val.jsonl"
    formats.save_validation(v, path)
    back = formats.load_validation(path)
    assert back == v


def test_validation_malformed(tmp_path):
    path = tmp_path / "val.jsonl"
    path.write_text('{"sample_id": 0}\n')
    with pytest.raises(ValueError) as e:
        formats.load_validation(path)
    assert "val.jsonl" in str(e.value)


def test_trace_round_trip(tmp_path):
    t = WorkloadTrace(np.array([0, 100, 2_000_000], dtype=np.int64))
    path = tmp_path / "trace.json"
    formats.save_trace(t, path)
    back = formats.load_trace(path)
    assert back == t


def test_trace_scaling(tmp_path):
    # 2 arrivals in second 0, 1 in second 1 -> max qps 2
    t = WorkloadTrace(np.array([0, 500_000, 1_000_000], dtype=np.int64))
    scaled = formats.scale_trace(t, target_max_qps=4.0)
    assert scaled.max_qps() == 4
    assert scaled.duration_us == t.duration_us
    counts = list(scaled.per_second_counts())
    assert counts == [4, 2]
    path = tmp_path / "trace.json"
    formats.save_trace(t, path)
    back = formats.load_trace(path, scale_to_max_qps=4.0)
    assert back == scaled


def test_scale_empty_trace_fails():
    t = WorkloadTrace(np.array([], dtype=np.int64), duration_us=0)
    with pytest.raises(ValueError):
        formats.scale_trace(t, 10.0)


def test_devices_round_trip(tmp_path):
    devs = [Device("d0", 100), Device("d1", 200)]
    path = tmp_path / "devices.json"
    formats.save_devices(devs, path)
    assert formats.load_devices(path) == devs


def _tiny_plan():
    pl = Placement([Replica("small@d0", "small", "d0"),
                    Replica("large@d0", "large", "d0")])
    cascade = Cascade(("small", "large"), (0.5,))
    gears = tuple(
        Gear(cascade=cascade,
             min_queue_length={"small@d0": q, "large@d0": 1},
             load_weights={"small": {"small@d0": 10.0 * (i + 1)},
                           "large": {"large@d0": 2.0 * (i + 1)}})
        for i, q in enumerate((1, 2)))
    return GearPlan(placement=pl, slo=Slo.latency(50_000), qps_max=20.0,
                    gears=gears)


def test_plan_round_trip(tmp_path):
    plan = _tiny_plan()
    path = tmp_path / "plan.json"
    formats.save_plan(plan, path)
    back = formats.load_plan(path)
    assert back.qps_max == plan.qps_max
    assert back.slo == plan.slo
    assert back.placement == plan.placement
    assert back.gears == plan.gears


def test_plan_rejects_duplicate_range_index(tmp_path):
    doc = formats.plan_to_dict(_tiny_plan())
    doc["gears"][1]["range_index"] = 0
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError) as e:
        formats.load_plan(path)
    assert "range" in str(e.value)


def test_plan_rejects_wrong_gear_count(tmp_path):
    doc = formats.plan_to_dict(_tiny_plan())
    doc["gears"] = doc["gears"][:1]
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        formats.load_plan(path)


def test_missing_file_mentions_path():
    with pytest.raises(FileNotFoundError) as e:
        formats.load_profiles("/nonexistent/profiles.json")
    assert "profiles.json" in str(e.value)
