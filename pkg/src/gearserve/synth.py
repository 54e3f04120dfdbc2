"""Synthetic workload construction.

Stands in for profiled model zoos: models are ordered by cost, and every
validation sample gets a difficulty tier. Tier 0 ("easy", a controllable
fraction) is answered correctly and confidently by every model; tier t > 0
is answered correctly only by models with index >= t, and a model that is
wrong is also unconfident. That makes cascading work by construction: cheap
models absorb the easy mass and forward the rest.

Batch runtime tables grow sublinearly (runtime1 * batch**batching_exponent),
so per-sample cost falls with batch size the way real dynamic batching does.
"""

from __future__ import annotations

import numpy as np

from .types import (
    US_PER_S,
    Device,
    ModelOutput,
    ModelProfile,
    ProfileSet,
    ValidationRecord,
    ValidationSet,
    WorkloadTrace,
)

DEFAULT_COST_RATIOS = (1.0, 4.0, 16.0)
DEFAULT_BATCHES = (1, 2, 4, 8)


def make_profiles(n_models: int = 3,
                  cost_ratios: tuple[float, ...] = DEFAULT_COST_RATIOS,
                  base_runtime_us: int = 2_000,
                  base_memory_bytes: int = 2_000_000_000,
                  memory_ratios: tuple[float, ...] | None = None,
                  batches: tuple[int, ...] = DEFAULT_BATCHES,
                  batching_exponent: float = 0.7) -> ProfileSet:
    """Models m0..m{k-1} ordered cheapest to priciest."""
    if n_models < 1:
        raise ValueError(f"n_models must be >= 1, got {n_models}")
    if len(cost_ratios) != n_models:
        raise ValueError(f"need {n_models} cost ratios, got {len(cost_ratios)}")
    if any(r <= 0 for r in cost_ratios):
        raise ValueError("cost ratios must be positive")
    if list(cost_ratios) != sorted(cost_ratios):
        raise ValueError("cost ratios must be non-decreasing")
    if not (0 < batching_exponent <= 1):
        raise ValueError("batching exponent must be in (0, 1]")
    memory_ratios = memory_ratios if memory_ratios is not None else cost_ratios
    if len(memory_ratios) != n_models:
        raise ValueError(f"need {n_models} memory ratios, got {len(memory_ratios)}")
    models = []
    for j in range(n_models):
        r1 = base_runtime_us * cost_ratios[j]
        table = {b: int(round(r1 * b ** batching_exponent)) for b in sorted(batches)}
        models.append(ModelProfile(
            model_id=f"m{j}",
            memory_bytes=int(round(base_memory_bytes * memory_ratios[j])),
            runtime_table=table))
    return ProfileSet(models)


def _tier_pattern(n_samples: int, easy_fraction: float, n_tiers: int) -> np.ndarray:
    """Difficulty tiers with exact proportions, spread evenly through the
    sample order (so any window of consecutive samples is representative)."""
    tiers = np.zeros(n_samples, dtype=np.int64)
    # Bresenham-style spreading of the easy mass
    hard_positions = [i for i in range(n_samples)
                      if int((i + 1) * easy_fraction) == int(i * easy_fraction)
                      and easy_fraction < 1.0]
    for k, i in enumerate(hard_positions):
        tiers[i] = 1 + k % max(1, n_tiers)
    return tiers


def make_validation(profiles: ProfileSet, n_samples: int = 500,
                    easy_fraction: float = 0.8, seed: int = 0,
                    confident_range: tuple[float, float] = (0.6, 0.95),
                    unsure_range: tuple[float, float] = (0.0, 0.3),
                    shuffle: bool = False) -> ValidationSet:
    """Tiered validation set for the given profile ordering.

    Model j is correct exactly on tiers <= j, confident exactly where correct.
    Certainties are drawn inside the given bands, so any threshold between the
    bands separates easy from difficult perfectly.
    """
    if not 0.0 <= easy_fraction <= 1.0:
        raise ValueError(f"easy_fraction must be in [0, 1], got {easy_fraction}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if not confident_range[0] > unsure_range[1]:
        raise ValueError("confident range must sit strictly above unsure range")
    n_models = len(profiles)
    tiers = _tier_pattern(n_samples, easy_fraction, max(1, n_models - 1))
    rng = np.random.default_rng(seed)
    if shuffle:
        tiers = rng.permutation(tiers)
    records = []
    for i in range(n_samples):
        outputs = {}
        for j, m in enumerate(profiles.model_ids):
            correct = tiers[i] <= j
            lo, hi = confident_range if correct else unsure_range
            c = float(rng.uniform(lo, hi))
            # two scores whose gap is exactly the drawn certainty
            outputs[m] = ModelOutput(scores=(0.5 + c / 2, 0.5 - c / 2),
                                     correct=bool(correct))
        records.append(ValidationRecord(sample_id=i, outputs=outputs))
    return ValidationSet(records)


def make_devices(n_devices: int = 2,
                 memory_bytes: int = 64_000_000_000) -> list[Device]:
    if n_devices < 1:
        raise ValueError(f"n_devices must be >= 1, got {n_devices}")
    return [Device(f"d{i}", memory_bytes) for i in range(n_devices)]


def constant_rate_trace(qps: float, seconds: float) -> WorkloadTrace:
    """Evenly spaced arrivals at a fixed rate."""
    if qps <= 0 or seconds <= 0:
        raise ValueError("qps and seconds must be positive")
    n = int(round(qps * seconds))
    if n == 0:
        raise ValueError(f"qps {qps} over {seconds}s yields no arrivals")
    arrivals = np.floor(np.arange(n, dtype=np.float64) * (US_PER_S / qps)).astype(np.int64)
    duration = int(round(seconds * US_PER_S))
    if int(arrivals[-1]) >= duration:
        duration = (int(arrivals[-1]) // US_PER_S + 1) * US_PER_S
    return WorkloadTrace(arrivals, duration_us=duration)


def step_trace(steps: list[tuple[float, float]]) -> WorkloadTrace:
    """Concatenated constant-rate segments: [(qps, seconds), ...].
    A segment with qps 0 contributes silence."""
    if not steps:
        raise ValueError("step trace needs at least one segment")
    parts = []
    offset_us = 0
    for qps, seconds in steps:
        if seconds <= 0:
            raise ValueError(f"segment duration must be positive, got {seconds}")
        if qps < 0:
            raise ValueError(f"segment qps must be >= 0, got {qps}")
        if qps > 0:
            seg = constant_rate_trace(qps, seconds)
            parts.append(seg.arrivals + offset_us)
        offset_us += int(round(seconds * US_PER_S))
    if not parts:
        raise ValueError("step trace has no arrivals")
    arrivals = np.concatenate(parts)
    return WorkloadTrace(arrivals, duration_us=offset_us)
