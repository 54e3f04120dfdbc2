"""Load balancing across replicas as a linear program.

Given per-model QPS demands and a placement, find per-replica QPS q_r
minimizing total assigned QPS subject to (a) every model's demand covered by
its replicas and (b) every device's busy fraction (sum of q_r times batch-1
per-sample runtime in seconds) staying at or below a utilization ceiling u.

Ties at the optimum are broken by a second pass minimizing the maximum device
busy fraction, which keeps plans stable across runs and doubles as an exact
minimal-utilization measurement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .types import Placement, ProfileSet, US_PER_S


class Infeasible(Exception):
    """The demands cannot be served within the utilization ceiling."""


@dataclass(frozen=True)
class LoadAssignment:
    qps: dict[str, float]
    achieved_u: float


def _clean_demands(placement: Placement, demands: dict[str, float],
                   profiles: ProfileSet) -> dict[str, float]:
    active = {}
    for m, d in demands.items():
        if m not in profiles:
            raise ValueError(f"demand for unprofiled model {m!r}")
        if d < 0:
            raise ValueError(f"negative demand for {m!r}: {d}")
        if d > 0:
            active[m] = float(d)
    return active


def solve_lp(placement: Placement, demands: dict[str, float],
             profiles: ProfileSet, u: float) -> LoadAssignment:
    """Minimize total assigned QPS under the utilization ceiling u.

    Raises Infeasible when no assignment covers the demands within u (also
    when a demanded model has no replica at all). Malformed inputs raise
    ValueError instead.
    """
    if not 0 < u <= 1:
        raise ValueError(f"u must be in (0, 1], got {u}")
    active = _clean_demands(placement, demands, profiles)
    zero = {r.replica_id: 0.0 for r in placement.replicas}
    if not active:
        return LoadAssignment(qps=zero, achieved_u=0.0)

    variables = []  # replicas of demanded models, in placement order
    for r in placement.replicas:
        if r.model_id in active:
            variables.append(r)
    for m in active:
        if not any(r.model_id == m for r in variables):
            raise Infeasible(f"model {m!r} has demand but no replica")

    n = len(variables)
    models = sorted(active)
    devices = sorted({r.device_id for r in placement.replicas})
    seconds = np.array([profiles[r.model_id].runtime_table[1] / US_PER_S
                        for r in variables])

    # coverage rows: -sum(q_r over replicas of m) <= -demand_m
    a_cov = np.zeros((len(models), n))
    b_cov = np.zeros(len(models))
    for i, m in enumerate(models):
        for j, r in enumerate(variables):
            if r.model_id == m:
                a_cov[i, j] = -1.0
        b_cov[i] = -active[m]
    # device rows: sum(q_r * seconds_r over replicas on d) <= u
    a_dev = np.zeros((len(devices), n))
    for i, d in enumerate(devices):
        for j, r in enumerate(variables):
            if r.device_id == d:
                a_dev[i, j] = seconds[j]

    res = linprog(c=np.ones(n),
                  A_ub=np.vstack([a_cov, a_dev]),
                  b_ub=np.concatenate([b_cov, np.full(len(devices), u)]),
                  bounds=[(0, None)] * n, method="highs")
    if res.status == 2:
        raise Infeasible(f"demands {active} unsatisfiable at u={u}")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed (status {res.status}): {res.message}")
    total = float(res.fun)
    want = sum(active.values())
    if abs(total - want) > 1e-6 * max(1.0, want):
        raise RuntimeError(
            f"coverage did not bind at the optimum: got {total}, expected {want}")

    # tie-break pass: same total QPS, minimize the max device busy fraction
    a_dev2 = np.hstack([a_dev, -np.ones((len(devices), 1))])
    a_cov2 = np.hstack([a_cov, np.zeros((len(models), 1))])
    a_sum = np.concatenate([np.ones(n), [0.0]])[None, :]
    res2 = linprog(c=np.concatenate([np.zeros(n), [1.0]]),
                   A_ub=np.vstack([a_cov2, a_dev2, a_sum]),
                   b_ub=np.concatenate([b_cov, np.zeros(len(devices)),
                                        [total * (1 + 1e-9) + 1e-9]]),
                   bounds=[(0, None)] * n + [(0, u)], method="highs")
    if res2.status != 0:
        raise RuntimeError(f"LP tie-break failed (status {res2.status}): {res2.message}")

    q = {rid: 0.0 for rid in zero}
    for j, r in enumerate(variables):
        q[r.replica_id] = max(0.0, float(res2.x[j]))
    busy = {d: 0.0 for d in devices}
    for j, r in enumerate(variables):
        busy[r.device_id] += q[r.replica_id] * seconds[j]
    return LoadAssignment(qps=q, achieved_u=max(busy.values()))


def min_utilization(placement: Placement, demands: dict[str, float],
                    profiles: ProfileSet, tol: float = 0.01) -> tuple[float, LoadAssignment]:
    """Smallest utilization ceiling (within tol) at which the demands fit,
    found by bisection on [0, 1]; feasibility is monotone in u.

    Raises Infeasible iff the demands are unsatisfiable even at u = 1.
    """
    active = _clean_demands(placement, demands, profiles)
    if not active:
        return 0.0, LoadAssignment(qps={r.replica_id: 0.0 for r in placement.replicas},
                                   achieved_u=0.0)
    best = solve_lp(placement, demands, profiles, 1.0)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = (lo + hi) / 2
        try:
            best = solve_lp(placement, demands, profiles, mid)
            hi = mid
        except Infeasible:
            lo = mid
    # the tie-break pass already minimizes the max busy fraction, so the final
    # assignment's achieved_u is the exact minimum; return it rather than the
    # bisection bracket
    return best.achieved_u, best
