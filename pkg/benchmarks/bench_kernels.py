#!/usr/bin/env python3
"""Benchmark the cascade-evaluation kernel: numba JIT vs pure-numpy fallback.

The two paths are bit-identical (tests/test_kernels.py asserts it); this
script measures what the JIT buys on a synthetic batch of cascades. The
numpy fallback is itself vectorized over records, so the gap is modest.
Typical output on one core:

    records=4000 models=6 cascades=200
    numpy      17.0 ms/call
    numba       5.3 ms/call
    speedup 3.2x (outputs bit-identical)
"""

import argparse
import time

import numpy as np

from gearserve import kernels
from gearserve.cascades import encode_cascades
from gearserve.types import Cascade, ModelProfile, ProfileSet


def build_problem(n_records, n_models, n_cascades, seed):
    rng = np.random.default_rng(seed)
    mids = [f"m{j}" for j in range(n_models)]
    profiles = ProfileSet([
        ModelProfile(mid, 1_000_000, {1: int(rng.integers(1_000, 60_000))})
        for mid in mids])
    cascades = []
    for _ in range(n_cascades):
        k = int(rng.integers(1, n_models + 1))
        stages = tuple(rng.permutation(mids)[:k])
        cascades.append(Cascade(
            stages=stages,
            thresholds=tuple(float(x) for x in rng.random(k - 1))))
    stage_model, thresholds, n_stages = encode_cascades(cascades, profiles)
    certainty = rng.random((n_records, n_models))
    correct = (rng.random((n_records, n_models)) < 0.7).astype(np.uint8)
    cost1 = np.array([profiles[m].runtime_table[1] for m in profiles.model_ids],
                     dtype=np.float64)
    return (np.ascontiguousarray(certainty),
            np.ascontiguousarray(correct),
            np.ascontiguousarray(stage_model, dtype=np.int32),
            np.ascontiguousarray(thresholds, dtype=np.float64),
            np.ascontiguousarray(n_stages, dtype=np.int32),
            cost1)


def time_path(fn, args, repeats):
    fn(*args)  # warmup (JIT compile / cache touch)
    started = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    return (time.perf_counter() - started) / repeats, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=4000)
    ap.add_argument("--models", type=int, default=6)
    ap.add_argument("--cascades", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    problem = build_problem(args.records, args.models, args.cascades, args.seed)
    print(f"records={args.records} models={args.models} "
          f"cascades={args.cascades}")

    t_np, out_np = time_path(kernels._evaluate_numpy, problem, args.repeats)
    print(f"numpy  {t_np * 1e3:8.1f} ms/call")

    if not kernels.HAS_NUMBA:
        print("numba not installed; nothing to compare")
        return

    t_nb, out_nb = time_path(kernels._evaluate_numba, problem, args.repeats)
    print(f"numba  {t_nb * 1e3:8.1f} ms/call")

    for a, b in zip(out_np, out_nb):
        assert np.array_equal(a, b), "paths diverged; see tests/test_kernels.py"
    print(f"speedup {t_np / t_nb:.1f}x (outputs bit-identical)")


if __name__ == "__main__":
    main()
