"""Offline gear-plan optimizer.

Coordinate descent over four submodules with error-driven backtracking:

  SP1 search_cascades   sample + evaluate cascades, keep the Pareto set
  SP2 assign_cascades   pick one cascade per QPS range, downgrade on error
  SP3 place_models      prune max replication to fit memory, balance load
  SP4 tune_batch_sizes  raise first-stage min queue lengths until ranges hold

ok advances to the next submodule, infeasible retreats to the previous one,
and an error arriving before SP1 means no plan can work. Once a full cycle
comes back ok (the plan is feasible), every later mutation is validated
against the simulator before being adopted, so the working plan never goes
back to infeasible; convergence is an all-ok cycle with zero plan change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine, lp
from .cascades import (
    CascadeEval,
    ThresholdGrid,
    build_threshold_grid,
    evaluate_cascades,
    model_qps_demand,
    pareto_filter,
    sample_cascades,
)
from .types import (
    US_PER_S,
    Cascade,
    Device,
    Gear,
    GearPlan,
    Placement,
    ProfileSet,
    QpsDistribution,
    Replica,
    Slo,
    ValidationSet,
    WorkloadTrace,
    replica_id_for,
)


class UserInfeasible(Exception):
    """No gear plan can satisfy the SLO with the available hardware."""


@dataclass(frozen=True)
class PlannerError:
    code: str  # "ok" | "infeasible"
    qps_range_index: int | None = None
    bottleneck_model: str | None = None
    reason: str = ""
    cause: str = "throughput"  # "throughput" | "latency" | "accuracy"

    @classmethod
    def ok(cls) -> "PlannerError":
        return cls(code="ok")

    @property
    def is_ok(self) -> bool:
        return self.code == "ok"


@dataclass
class CandidateInfo:
    cascade: Cascade
    eval: CascadeEval
    throughput_qps: float
    added_at_call: int


@dataclass
class PlannerConfig:
    n_samples: int = 2000
    grid_levels: int = 10
    probe_duration_s: float = 10.0
    probe_warmup_s: float = 2.0
    backlog_factor: float = 2.0
    measure_period_us: int = 100_000
    burst_probe_samples: int = 256
    lp_tol: float = 0.01
    prune_utility_mode: str = "relieved"  # or "remaining" (printed-form compatibility)
    max_submodule_calls: int = 100_000  # safety valve against bugs, not a knob


@dataclass
class _ProbeResult:
    completed: int
    arrivals: int
    p95_us: int | None
    first_stage_backlog: int
    backlog_threshold: float
    model_end_queues: dict[str, int]

    @property
    def backlog_ok(self) -> bool:
        return self.first_stage_backlog <= self.backlog_threshold


@dataclass
class PlannerState:
    profiles: ProfileSet
    devices: list[Device]
    validation: ValidationSet
    dist: QpsDistribution
    slo: Slo
    qps_max: float
    n_ranges: int
    seed: int
    config: PlannerConfig
    grid: ThresholdGrid
    placement: Placement
    candidate_cascades: dict[Cascade, CandidateInfo] = field(default_factory=dict)
    assigned: list[Cascade | None] = field(default_factory=list)
    downgrade_index: dict[int, int] = field(default_factory=dict)
    tried: list[set[Cascade]] = field(default_factory=list)
    min_qlen_first: list[int] = field(default_factory=list)
    weights: list[dict[str, dict[str, float]] | None] = field(default_factory=list)
    forced_replicas: dict[str, int] = field(default_factory=dict)
    feasible_mode: bool = False
    counters: dict[str, int] = field(default_factory=dict)
    call_index: int = 0
    downgrades: int = 0
    log: list[dict] = field(default_factory=list)
    tabu_swaps: set = field(default_factory=set)
    rejected_placements: set = field(default_factory=set)
    _unit_u_cache: dict = field(default_factory=dict)
    _weights_cache: dict = field(default_factory=dict)
    _probe_cache: dict = field(default_factory=dict)
    _burst_cache: dict = field(default_factory=dict)

    # -- small helpers -------------------------------------------------------

    def top_qps(self, i: int) -> float:
        return (i + 1) * self.qps_max / self.n_ranges

    def eval_of(self, cascade: Cascade) -> CascadeEval:
        return self.candidate_cascades[cascade].eval

    def demands(self, i: int, cascade: Cascade | None = None) -> dict[str, float]:
        c = cascade or self.assigned[i]
        return model_qps_demand(self.eval_of(c), self.top_qps(i))

    def plan_accuracy(self, assigned=None) -> float:
        assigned = assigned or self.assigned
        return sum(w * self.eval_of(c).accuracy
                   for w, c in zip(self.dist.weights, assigned))

    def plan_mean_cost(self) -> float:
        return sum(w * self.eval_of(c).mean_cost
                   for w, c in zip(self.dist.weights, self.assigned))


def _max_replication(profiles: ProfileSet, devices: list[Device]) -> Placement:
    return Placement([Replica(replica_id_for(m, d.device_id), m, d.device_id)
                      for m in profiles.model_ids for d in devices])


def init_plan(profiles: ProfileSet, devices: list[Device], dist: QpsDistribution,
              slo: Slo, *, validation: ValidationSet | None = None,
              qps_max: float = 1.0, seed: int = 0,
              config: PlannerConfig | None = None) -> PlannerState:
    """Fresh planner state: every model replicated on every device (memory may
    be overallocated at this point by design), all min queue lengths 1, no
    cascades assigned yet (SP2's first call does that)."""
    cfg = config or PlannerConfig()
    n_ranges = dist.n_ranges
    grid = None
    if validation is not None:
        grid = build_threshold_grid(validation, profiles, cfg.grid_levels)
    return PlannerState(
        profiles=profiles, devices=list(devices), validation=validation,
        dist=dist, slo=slo, qps_max=qps_max, n_ranges=n_ranges, seed=seed,
        config=cfg, grid=grid, placement=_max_replication(profiles, devices),
        assigned=[None] * n_ranges,
        downgrade_index={i: 0 for i in range(n_ranges)},
        tried=[set() for _ in range(n_ranges)],
        min_qlen_first=[1] * n_ranges,
        weights=[None] * n_ranges,
        counters={"sp1": 0, "sp2": 0, "sp3": 0, "sp4": 0},
    )


# -- plan materialization ----------------------------------------------------

def _build_gear(state: PlannerState, i: int, placement: Placement | None = None,
                cascade: Cascade | None = None, weights=None, q: int | None = None) -> Gear:
    placement = placement or state.placement
    cascade = cascade or state.assigned[i]
    weights = weights if weights is not None else state.weights[i]
    q = q if q is not None else state.min_qlen_first[i]
    min_qlen = {}
    first = cascade.stages[0]
    for m in cascade.stages:
        for r in placement.replicas_of(m):
            min_qlen[r.replica_id] = q if m == first else 1
    return Gear(cascade=cascade, min_queue_length=min_qlen, load_weights=weights)


def build_plan(state: PlannerState) -> GearPlan:
    if any(c is None for c in state.assigned) or any(w is None for w in state.weights):
        raise ValueError("plan is not fully assigned yet")
    gears = tuple(_build_gear(state, i) for i in range(state.n_ranges))
    plan = GearPlan(placement=state.placement, slo=state.slo,
                    qps_max=state.qps_max, gears=gears)
    plan.validate(devices=state.devices, profiles=state.profiles)
    return plan


def plan_fingerprint(state: PlannerState) -> str:
    doc = {
        "placement": sorted(r.replica_id for r in state.placement.replicas),
        "ranges": [
            {
                "cascade": None if c is None else [list(c.stages), list(c.thresholds)],
                "q": state.min_qlen_first[i],
                "weights": None if state.weights[i] is None else sorted(
                    (m, rid, round(w, 9))
                    for m, per in state.weights[i].items() for rid, w in per.items()),
            }
            for i, c in enumerate(state.assigned)
        ],
    }
    return json.dumps(doc, sort_keys=True)


# -- LP helpers --------------------------------------------------------------

def _unit_utilization(state: PlannerState, placement: Placement,
                      cascade: Cascade) -> float | None:
    """Exact minimal utilization for this cascade's demands at 1 QPS total
    (scales linearly with QPS). None when coverage is impossible outright."""
    key = (placement.signature(), cascade)
    if key in state._unit_u_cache:
        return state._unit_u_cache[key]
    demands = model_qps_demand(state.eval_of(cascade), 1.0)
    try:
        # the tie-break pass inside solve_lp minimizes the max busy fraction,
        # so achieved_u at the loosest ceiling is already the exact minimum
        result = lp.solve_lp(placement, demands, state.profiles, 1.0).achieved_u
    except lp.Infeasible:
        result = None
    state._unit_u_cache[key] = result
    return result


def _range_weights(state: PlannerState, i: int, placement: Placement,
                   cascade: Cascade):
    """Load weights for one range via the minimum-utilization search; None if
    the demands cannot be covered at full utilization."""
    key = (placement.signature(), cascade, round(state.top_qps(i), 9))
    if key in state._weights_cache:
        return state._weights_cache[key]
    demands = model_qps_demand(state.eval_of(cascade), state.top_qps(i))
    try:
        _, assignment = lp.min_utilization(placement, demands, state.profiles,
                                           tol=state.config.lp_tol)
        weights: dict[str, dict[str, float]] = {}
        for m in cascade.stages:
            weights[m] = {r.replica_id: assignment.qps.get(r.replica_id, 0.0)
                          for r in placement.replicas_of(m)}
        result = weights
    except lp.Infeasible:
        result = None
    state._weights_cache[key] = result
    return result


# -- simulator probes --------------------------------------------------------

def _constant_rate_trace(qps: float, seconds: float) -> WorkloadTrace:
    n = int(round(qps * seconds))
    arrivals = (np.arange(n, dtype=np.int64) * US_PER_S) // max(1, int(round(qps)))
    duration = int(seconds * US_PER_S)
    if n and int(arrivals[-1]) >= duration:
        duration = (int(arrivals[-1]) // US_PER_S + 1) * US_PER_S
    return WorkloadTrace(arrivals, duration_us=duration)


def _weights_signature(weights) -> tuple:
    return tuple(sorted((m, rid, round(w, 9))
                 for m, per in weights.items() for rid, w in per.items()))


def _probe_range(state: PlannerState, i: int, placement: Placement,
                 cascade: Cascade, weights, q: int) -> _ProbeResult:
    """Constant-rate probe of one gear at the range's top QPS."""
    top = state.top_qps(i)
    key = (placement.signature(), cascade, q, round(top, 9), _weights_signature(weights))
    if key in state._probe_cache:
        return state._probe_cache[key]
    cfg = state.config
    gear = _build_gear(state, i, placement=placement, cascade=cascade,
                       weights=weights, q=q)
    plan = GearPlan(placement=placement, slo=state.slo, qps_max=max(top, 1e-9),
                    gears=(gear,))
    trace = _constant_rate_trace(top, cfg.probe_warmup_s + cfg.probe_duration_s)
    metrics = engine.run(plan, trace, state.validation, state.profiles,
                         config=engine.EngineConfig(seed=state.seed, enable_ticks=False))
    warm_us = int(cfg.probe_warmup_s * US_PER_S)
    post = [r for r in metrics.per_request if r.arrival_us >= warm_us]
    lat = [r.completion_us - r.arrival_us for r in post]
    first_model = cascade.stages[0]
    per_model: dict[str, int] = {}
    for r in placement.replicas:
        if r.model_id in cascade.stages:
            per_model[r.model_id] = per_model.get(r.model_id, 0) + \
                metrics.queue_len_at_horizon[r.replica_id]
    result = _ProbeResult(
        completed=len(post),
        arrivals=metrics.arrivals,
        p95_us=int(engine.percentile(lat, 95)) if lat else None,
        first_stage_backlog=per_model.get(first_model, 0),
        backlog_threshold=cfg.backlog_factor * top * (cfg.measure_period_us / US_PER_S),
        model_end_queues=per_model,
    )
    state._probe_cache[key] = result
    return result


def _burst_throughput(state: PlannerState, cascade: Cascade,
                      placement: Placement) -> float:
    """Max sustained QPS estimate: flood the cascade with a burst at t=0 under
    uniform per-model load split and measure completions over the makespan."""
    key = (placement.signature(), cascade)
    if key in state._burst_cache:
        return state._burst_cache[key]
    if any(not placement.replicas_of(m) for m in cascade.stages):
        state._burst_cache[key] = 0.0
        return 0.0
    weights = {m: {r.replica_id: 1.0 for r in placement.replicas_of(m)}
               for m in cascade.stages}
    gear = _build_gear(state, 0, placement=placement, cascade=cascade,
                       weights=weights, q=1)
    plan = GearPlan(placement=placement, slo=state.slo, qps_max=1.0, gears=(gear,))
    n = state.config.burst_probe_samples
    serial_us = sum(state.profiles[m].runtime_table[1] for m in cascade.stages)
    duration = n * serial_us * 2 + US_PER_S
    trace = WorkloadTrace(np.zeros(n, dtype=np.int64), duration_us=duration)
    metrics = engine.run(plan, trace, state.validation, state.profiles,
                         config=engine.EngineConfig(seed=state.seed, enable_ticks=False))
    if metrics.completed == 0:
        result = 0.0
    else:
        makespan = max(r.completion_us for r in metrics.per_request)
        result = metrics.completed / (makespan / US_PER_S) if makespan > 0 else 0.0
    state._burst_cache[key] = result
    return result


# -- SP1: cascade search -----------------------------------------------------

def _singleton(m: str) -> Cascade:
    return Cascade(stages=(m,), thresholds=())


def sp1_search_cascades(err: PlannerError, state: PlannerState):
    """Sample new cascades, keep the Pareto front, grow the candidate pool,
    refresh throughput probes. An infeasibility arriving here means even the
    extreme fallback cascades failed: planning is hopeless."""
    state.counters["sp1"] += 1
    if not err.is_ok:
        raise UserInfeasible(
            "impossible to meet the SLO given the provided hardware resource: "
            + (err.reason or "all cascade downgrades exhausted"))
    sampled = sample_cascades(state.profiles, state.grid, state.config.n_samples,
                              rng_seed=state.seed + state.counters["sp1"] - 1)
    evals = evaluate_cascades(sampled, state.validation, state.profiles)
    by_cascade = dict(zip(sampled, evals))
    keep = [c for c, _ in pareto_filter(list(by_cascade.items()))]
    # guaranteed fallbacks: cheapest model and most accurate model, standalone
    singles = [(c, by_cascade[c]) for c in map(_singleton, state.profiles.model_ids)]
    cheapest = min(singles, key=lambda p: (p[1].mean_cost, p[0].stages))[0]
    most_accurate = max(singles, key=lambda p: (p[1].accuracy, -p[1].mean_cost))[0]
    for c in [cheapest, most_accurate] + keep:
        if c not in state.candidate_cascades:
            state.candidate_cascades[c] = CandidateInfo(
                cascade=c, eval=by_cascade[c], throughput_qps=0.0,
                added_at_call=state.call_index)
    for info in state.candidate_cascades.values():
        info.throughput_qps = _burst_throughput(state, info.cascade, state.placement)
    return PlannerError.ok(), state


# -- SP2: cascade assignment -------------------------------------------------

def _slo_order(state: PlannerState) -> list[Cascade]:
    """Candidates in SLO-compatible order: position 0 is the starting choice,
    advancing = downgrading. Latency SLO: by accuracy descending; accuracy
    SLO: by mean cost ascending ('downgrade' moves toward more accurate)."""
    def key(c: Cascade):
        ev = state.eval_of(c)
        if state.slo.kind == "latency":
            return (-ev.accuracy, ev.mean_cost, c.stages, c.thresholds)
        return (ev.mean_cost, -ev.accuracy, c.stages, c.thresholds)
    return sorted(state.candidate_cascades, key=key)


def _sync_downgrade_index(state: PlannerState, order: list[Cascade]) -> None:
    for i, c in enumerate(state.assigned):
        if c is not None:
            state.downgrade_index[i] = order.index(c)


def _validate_swap(state: PlannerState, i: int, cascade: Cascade):
    """Transactional check for a post-feasibility swap: recompute the range's
    load weights and batching; returns (weights, q) or None if the swap would
    break feasibility."""
    weights = _range_weights(state, i, state.placement, cascade)
    if weights is None:
        return None
    cap = state.profiles[cascade.stages[0]].max_profiled_batch
    for q in range(1, cap + 1):
        probe = _probe_range(state, i, state.placement, cascade, weights, q)
        if _probe_meets(state, probe):
            return weights, q
    return None


def _probe_meets(state: PlannerState, probe: _ProbeResult) -> bool:
    if not probe.backlog_ok:
        return False
    if state.slo.kind == "latency":
        return probe.p95_us is not None and probe.p95_us <= state.slo.latency_target_us
    return True


def sp2_assign_cascades(err: PlannerError, state: PlannerState):
    state.counters["sp2"] += 1
    if not state.candidate_cascades:
        raise ValueError("sp2 called with no candidate cascades")
    order = _slo_order(state)

    if state.assigned[0] is None:
        best = order[0]
        state.assigned = [best] * state.n_ranges
        for i in range(state.n_ranges):
            state.tried[i].add(best)
        _sync_downgrade_index(state, order)
        return PlannerError.ok(), state

    if not err.is_ok:
        i = err.qps_range_index
        if i is None:
            return err, state
        cur = state.assigned[i]
        pos = order.index(cur)
        ahead = (c for c in order[pos + 1:] if c not in state.tried[i])
        if err.cause == "accuracy":
            # an accuracy upgrade has to actually raise accuracy; stepping
            # through same-or-worse cost variants would burn the tried set
            # without moving the plan
            cur_acc = state.eval_of(cur).accuracy
            ahead = (c for c in ahead if state.eval_of(c).accuracy > cur_acc)
        nxt = next(ahead, None)
        if nxt is None:
            return PlannerError(
                code="infeasible", qps_range_index=i,
                reason=f"range {i}: no further cascade downgrade available"), state
        state.assigned[i] = nxt
        state.tried[i].add(nxt)
        state.weights[i] = None
        state.min_qlen_first[i] = 1
        state.downgrades += 1
        _sync_downgrade_index(state, order)
        return PlannerError.ok(), state

    # ok path: swap in new candidates that are better or equal on both
    # accuracy and probed throughput (strictly better in one)
    for i in range(state.n_ranges):
        cur = state.assigned[i]
        cur_info = state.candidate_cascades[cur]
        best = None
        for c, info in state.candidate_cascades.items():
            # tried also gates swaps: never hand a range back a cascade it
            # already moved away from, or assignment could oscillate
            if c == cur or c in state.tried[i] or (i, c) in state.tabu_swaps:
                continue
            if info.eval.accuracy < cur_info.eval.accuracy:
                continue
            if info.throughput_qps < cur_info.throughput_qps:
                continue
            strict = (info.eval.accuracy > cur_info.eval.accuracy
                      or info.throughput_qps > cur_info.throughput_qps)
            if state.slo.kind == "accuracy":
                if info.eval.mean_cost > cur_info.eval.mean_cost:
                    continue
                strict = strict or info.eval.mean_cost < cur_info.eval.mean_cost
            if not strict:
                continue
            cand_key = (info.eval.accuracy, info.throughput_qps,
                        -info.eval.mean_cost)
            if best is None or cand_key > best[0]:
                best = (cand_key, c)
        if best is None:
            continue
        c = best[1]
        if state.feasible_mode:
            outcome = _validate_swap(state, i, c)
            if outcome is None:
                state.tabu_swaps.add((i, c))
                continue
            weights, q = outcome
            state.assigned[i] = c
            state.weights[i] = weights
            state.min_qlen_first[i] = q
        else:
            state.assigned[i] = c
            state.weights[i] = None
            state.min_qlen_first[i] = 1
        state.tried[i].add(c)
    _sync_downgrade_index(state, order)
    return PlannerError.ok(), state


# -- SP3: model placement ----------------------------------------------------

def _floors(state: PlannerState) -> dict[str, int]:
    used = {m for c in state.assigned if c is not None for m in c.stages}
    floors = {}
    for m in state.profiles.model_ids:
        f = state.forced_replicas.get(m, 0)
        if m in used:
            f = max(f, 1)
        floors[m] = min(f, len(state.devices))
    return floors


def _prune_utility(state: PlannerState, placement: Placement, replica: Replica,
                   over: dict[str, int], max_tops: dict[Cascade, float]) -> float | None:
    """Eq-style pruning utility: memory relief over the worst-case minimal
    utilization once the replica is gone. None encodes -inf (never prune)."""
    mem = state.profiles[replica.model_id].memory_bytes
    device_over = over.get(replica.device_id, 0)
    relieved = min(device_over, mem) if device_over > 0 else 0
    if state.config.prune_utility_mode == "remaining":
        numerator = sum(max(0, o - (mem if d == replica.device_id else 0))
                        for d, o in over.items())
    else:
        numerator = relieved
    without = placement.without(replica.replica_id)
    u_max = 0.0
    for cascade, top in max_tops.items():
        if replica.model_id in cascade.stages:
            u = _unit_utilization(state, without, cascade)
        else:
            u = _unit_utilization(state, placement, cascade)
        if u is None:
            return None
        u_max = max(u_max, u * top)
    if u_max > 1.0 + 1e-9:
        return None  # the load balancer cannot run this range without r
    return numerator / max(u_max, 1e-12)


def _prune_placement(state: PlannerState):
    """From max replication (plus forced floors), prune the highest-utility
    replica until everything fits in device memory. Returns a Placement or a
    backward PlannerError when no placement can realize the assignments."""
    floors = _floors(state)
    placement = _max_replication(state.profiles, state.devices)
    max_tops: dict[Cascade, float] = {}
    for i, c in enumerate(state.assigned):
        max_tops[c] = max(max_tops.get(c, 0.0), state.top_qps(i))
    while True:
        over = {d: o for d, o in
                placement.overallocation(state.devices, state.profiles).items() if o > 0}
        if not over:
            return placement
        counts = placement.model_counts()
        best = None
        for r in placement.replicas:
            if counts[r.model_id] <= floors[r.model_id]:
                continue
            util = _prune_utility(state, placement, r, over, max_tops)
            if util is None or util <= 0.0:
                continue
            key = (util, r.replica_id)
            if best is None or key > best[0]:
                best = (key, r)
        if best is None:
            i = _highest_downgradable_range(state)
            return PlannerError(
                code="infeasible", qps_range_index=i,
                reason="no memory-feasible placement realizes the assigned cascades")
        placement = placement.without(best[1].replica_id)


def _highest_downgradable_range(state: PlannerState) -> int:
    order = _slo_order(state)
    for i in range(state.n_ranges - 1, -1, -1):
        cur = state.assigned[i]
        pos = order.index(cur)
        if any(c not in state.tried[i] for c in order[pos + 1:]):
            return i
    return state.n_ranges - 1


def sp3_place_models(err: PlannerError, state: PlannerState):
    state.counters["sp3"] += 1
    if any(c is None for c in state.assigned):
        raise ValueError("sp3 called before cascades were assigned")

    if not err.is_ok:
        if err.cause in ("accuracy", "latency"):
            # not a throughput problem: replicas cannot help, pass it back
            return err, state
        m = err.bottleneck_model
        count = state.placement.model_counts().get(m, 0)
        if m is None or count >= len(state.devices):
            return PlannerError(
                code="infeasible", qps_range_index=err.qps_range_index,
                reason=f"cannot add another replica of {m}: all devices used"), state
        state.forced_replicas[m] = count + 1

    proposal = _prune_placement(state)
    if isinstance(proposal, PlannerError):
        return proposal, state

    new_weights = []
    for i in range(state.n_ranges):
        w = _range_weights(state, i, proposal, state.assigned[i])
        if w is None:
            return PlannerError(
                code="infeasible", qps_range_index=i,
                reason=f"range {i}: demands exceed capacity at full utilization"), state
        new_weights.append(w)

    if state.feasible_mode and proposal != state.placement:
        sig = proposal.signature()
        if sig in state.rejected_placements:
            return PlannerError.ok(), state
        tuned = []
        for i in range(state.n_ranges):
            found = None
            cap = state.profiles[state.assigned[i].stages[0]].max_profiled_batch
            for q in range(1, cap + 1):
                probe = _probe_range(state, i, proposal, state.assigned[i],
                                     new_weights[i], q)
                if _probe_meets(state, probe):
                    found = q
                    break
            if found is None:
                state.rejected_placements.add(sig)
                return PlannerError.ok(), state  # keep the current feasible placement
            tuned.append(found)
        state.placement = proposal
        state.weights = new_weights
        state.min_qlen_first = tuned
        return PlannerError.ok(), state

    state.placement = proposal
    state.weights = new_weights
    return PlannerError.ok(), state


# -- SP4: batch-size tuning --------------------------------------------------

def _cascade_latency_floor_us(state: PlannerState, cascade: Cascade) -> int:
    return sum(state.profiles[m].runtime_table[1] for m in cascade.stages)


def _bottleneck_model(state: PlannerState, i: int, cascade: Cascade,
                      probe: _ProbeResult) -> str:
    """First cascade stage whose end-of-probe queue exceeds its expected
    per-window arrival volume; falls back to the first stage."""
    top = state.top_qps(i)
    period_s = state.config.measure_period_us / US_PER_S
    ff = state.eval_of(cascade).forward_fraction
    for m in cascade.stages:
        thr = state.config.backlog_factor * top * ff[m] * period_s
        if probe.model_end_queues.get(m, 0) > max(thr, 1.0):
            return m
    return cascade.stages[0]


def sp4_tune_batch_sizes(err: PlannerError, state: PlannerState):
    state.counters["sp4"] += 1
    for i in range(state.n_ranges):
        cascade = state.assigned[i]
        weights = state.weights[i]
        if weights is None:
            raise ValueError(f"sp4 called without load weights for range {i}")
        cap = state.profiles[cascade.stages[0]].max_profiled_batch
        found = None
        last_probe = None
        for q in range(1, cap + 1):
            probe = _probe_range(state, i, state.placement, cascade, weights, q)
            last_probe = probe
            if _probe_meets(state, probe):
                found = q
                break
        if found is None:
            if (state.slo.kind == "latency" and last_probe.backlog_ok
                    and _cascade_latency_floor_us(state, cascade) > state.slo.latency_target_us):
                return PlannerError(
                    code="infeasible", qps_range_index=i,
                    bottleneck_model=cascade.stages[-1], cause="latency",
                    reason=f"range {i}: cascade latency floor exceeds the target"), state
            m = _bottleneck_model(state, i, cascade, last_probe)
            return PlannerError(
                code="infeasible", qps_range_index=i, bottleneck_model=m,
                reason=f"range {i}: throughput insufficient at max batching"), state
        state.min_qlen_first[i] = found

    if state.slo.kind == "accuracy":
        acc = state.plan_accuracy()
        if acc < state.slo.accuracy_target:
            i = _upgrade_range(state)
            if i is None:
                return PlannerError(
                    code="infeasible", qps_range_index=0, cause="accuracy",
                    bottleneck_model=state.assigned[0].stages[-1],
                    reason="accuracy target unreachable with remaining candidates"), state
            return PlannerError(
                code="infeasible", qps_range_index=i, cause="accuracy",
                bottleneck_model=state.assigned[i].stages[-1],
                reason=f"plan accuracy {acc:.4f} below target; upgrade range {i}"), state
    return PlannerError.ok(), state


def _upgrade_range(state: PlannerState) -> int | None:
    """Range whose advance in SLO order buys the most weighted accuracy.

    Gain is measured against the most accurate untried candidate ahead in the
    order, not the immediate neighbour: a range whose next variant is a
    lateral move must not shadow a range that still has real headroom. Ranges
    with no positive gain left are skipped, so a None here means the target
    is out of reach for the whole candidate set."""
    order = _slo_order(state)
    best = None
    for i in range(state.n_ranges):
        cur_acc = state.eval_of(state.assigned[i]).accuracy
        pos = order.index(state.assigned[i])
        ahead = [state.eval_of(c).accuracy
                 for c in order[pos + 1:] if c not in state.tried[i]]
        if not ahead:
            continue
        gain = state.dist.weights[i] * (max(ahead) - cur_acc)
        if gain <= 0.0:
            continue
        if best is None or gain > best[0]:
            best = (gain, i)
    return None if best is None else best[1]


# -- the coordinate-descent loop ---------------------------------------------

_SUBMODULES = [
    ("sp1", sp1_search_cascades),
    ("sp2", sp2_assign_cascades),
    ("sp3", sp3_place_models),
    ("sp4", sp4_tune_batch_sizes),
]


def optimize_with_state(profiles: ProfileSet, devices: list[Device],
                        validation: ValidationSet, dist: QpsDistribution,
                        slo: Slo, qps_max: float, n_ranges: int, seed: int = 0,
                        *, config: PlannerConfig | None = None,
                        on_step=None) -> tuple[GearPlan, PlannerState]:
    """Run the full planning loop; returns the converged plan plus the final
    state (counters, log, candidates) for reporting and instrumentation."""
    if qps_max <= 0:
        raise ValueError(f"qps_max must be positive, got {qps_max}")
    if n_ranges < 1:
        raise ValueError(f"n_ranges must be >= 1, got {n_ranges}")
    if dist.n_ranges != n_ranges:
        raise ValueError(f"distribution covers {dist.n_ranges} ranges, want {n_ranges}")
    cfg = config or PlannerConfig()
    state = init_plan(profiles, devices, dist, slo, validation=validation,
                      qps_max=qps_max, seed=seed, config=cfg)

    idx = 0
    err = PlannerError.ok()
    cycle_fp = None  # fingerprint at the start of a potentially converging cycle
    while True:
        if idx < 0:
            raise UserInfeasible(
                "impossible to meet the SLO given the provided hardware resource: "
                + (err.reason or "planning backtracked past the first submodule"))
        name, fn = _SUBMODULES[idx]
        if idx == 0 and err.is_ok:
            cycle_fp = plan_fingerprint(state)
        new_err, state = fn(err, state)
        state.call_index += 1
        state.log.append({
            "call": state.call_index, "submodule": name, "code": new_err.code,
            "range": new_err.qps_range_index, "plan_hash": hash(plan_fingerprint(state)) & 0xFFFFFFFF,
        })
        if on_step is not None:
            on_step(state, name, new_err)
        if new_err.is_ok:
            if idx == 3:
                state.feasible_mode = True
                if cycle_fp is not None and plan_fingerprint(state) == cycle_fp:
                    return build_plan(state), state
            idx = (idx + 1) % 4
        else:
            cycle_fp = None
            idx -= 1
        err = new_err
        if state.call_index > cfg.max_submodule_calls:
            raise RuntimeError(
                f"planner exceeded {cfg.max_submodule_calls} submodule calls; "
                "this is a bug, not an infeasible workload")


def optimize(profiles: ProfileSet, devices: list[Device], validation: ValidationSet,
             dist: QpsDistribution, slo: Slo, qps_max: float, n_ranges: int,
             seed: int = 0, *, config: PlannerConfig | None = None) -> GearPlan:
    plan, _ = optimize_with_state(profiles, devices, validation, dist, slo,
                                  qps_max, n_ranges, seed, config=config)
    return plan
