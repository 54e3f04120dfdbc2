"""Numeric kernels for batch cascade evaluation.

The hot loop walks every validation record through every encoded cascade. It
compiles with numba when available; set GEARSERVE_DISABLE_NUMBA=1 (or run
without numba installed) to use the pure-numpy fallback. Both paths implement
identical arithmetic in identical accumulation order, so results match
bit-for-bit; benchmarks/bench_kernels.py compares their speed.

Cascade encoding (see cascades.encode_cascades):
  stage_model[c, s]  model column index of stage s of cascade c (-1 padding)
  thresholds[c, s]   forwarding threshold of stage s (unused at the last stage)
  n_stages[c]        number of stages of cascade c
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


def numba_enabled() -> bool:
    return HAS_NUMBA and os.environ.get("GEARSERVE_DISABLE_NUMBA", "") not in ("1", "true", "yes")


@njit(cache=True)
def _evaluate_numba(certainty, correct, stage_model, thresholds, n_stages, cost1):
    n_casc = stage_model.shape[0]
    n_rec = certainty.shape[0]
    max_len = stage_model.shape[1]
    accuracy = np.zeros(n_casc)
    mean_cost = np.zeros(n_casc)
    forward_frac = np.zeros((n_casc, max_len))
    for c in range(n_casc):
        ns = n_stages[c]
        n_correct = 0
        for r in range(n_rec):
            for s in range(ns):
                m = stage_model[c, s]
                forward_frac[c, s] += 1.0
                if s == ns - 1 or certainty[r, m] >= thresholds[c, s]:
                    n_correct += correct[r, m]
                    break
        for s in range(ns):
            frac = forward_frac[c, s] / n_rec
            forward_frac[c, s] = frac
            mean_cost[c] += frac * cost1[stage_model[c, s]]
        accuracy[c] = n_correct / n_rec
    return accuracy, mean_cost, forward_frac


def _evaluate_numpy(certainty, correct, stage_model, thresholds, n_stages, cost1):
    n_casc = stage_model.shape[0]
    n_rec = certainty.shape[0]
    max_len = stage_model.shape[1]
    accuracy = np.zeros(n_casc)
    mean_cost = np.zeros(n_casc)
    forward_frac = np.zeros((n_casc, max_len))
    for c in range(n_casc):
        ns = int(n_stages[c])
        active = np.ones(n_rec, dtype=np.bool_)
        n_correct = 0
        for s in range(ns):
            m = int(stage_model[c, s])
            n_active = int(active.sum())
            forward_frac[c, s] = n_active / n_rec
            if s == ns - 1:
                stops = active
            else:
                stops = active & (certainty[:, m] >= thresholds[c, s])
            n_correct += int(correct[stops, m].sum())
            active = active & ~stops
        # second pass mirrors the numba accumulation order exactly
        for s in range(ns):
            mean_cost[c] += forward_frac[c, s] * cost1[int(stage_model[c, s])]
        accuracy[c] = n_correct / n_rec
    return accuracy, mean_cost, forward_frac


def evaluate_encoded(certainty: np.ndarray, correct: np.ndarray,
                     stage_model: np.ndarray, thresholds: np.ndarray,
                     n_stages: np.ndarray, cost1: np.ndarray):
    """Dispatch to the compiled kernel or the numpy fallback.

    Returns (accuracy[n_casc], mean_cost[n_casc], forward_frac[n_casc, max_len]).
    """
    certainty = np.ascontiguousarray(certainty, dtype=np.float64)
    correct = np.ascontiguousarray(correct, dtype=np.uint8)
    stage_model = np.ascontiguousarray(stage_model, dtype=np.int32)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    n_stages = np.ascontiguousarray(n_stages, dtype=np.int32)
    cost1 = np.ascontiguousarray(cost1, dtype=np.float64)
    if numba_enabled():
        return _evaluate_numba(certainty, correct, stage_model, thresholds, n_stages, cost1)
    return _evaluate_numpy(certainty, correct, stage_model, thresholds, n_stages, cost1)
