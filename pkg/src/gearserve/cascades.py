"""Offline cascade evaluation against recorded validation outputs.

A cascade is scored by walking every validation record through its stages:
the record stops at the first stage whose certainty clears that stage's
threshold (the final stage always stops it). Accuracy, per-stage forward
fractions, and mean cost all fall out of that walk; the walk itself runs in
kernels.evaluate_encoded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .types import Cascade, ProfileSet, ValidationSet


def certainty(scores) -> float:
    """Prediction certainty: highest score minus second-highest. A single
    score is compared against an implicit second score of 0."""
    if len(scores) == 0:
        raise ValueError("certainty of empty scores")
    if len(scores) == 1:
        return float(scores[0])
    top, second = sorted(scores, reverse=True)[:2]
    return float(top - second)


@dataclass(frozen=True)
class CascadeEval:
    """Offline metrics of one cascade on one validation set.

    mean_cost is the forward-fraction-weighted sum of batch-1 runtimes (µs):
    the expected per-sample compute cost of the cascade.
    """

    accuracy: float
    mean_cost: float
    forward_fraction: dict[str, float]


def matrices(validation: ValidationSet, profiles: ProfileSet) -> tuple[np.ndarray, np.ndarray]:
    """(certainty, correct) matrices of shape [n_records, n_models] in profile
    order, cached on the validation set."""
    key = profiles.model_ids
    cached = validation._matrix_cache.get(key)
    if cached is not None:
        return cached
    missing = set(key) - validation.model_ids
    if missing:
        raise ValueError(f"validation set lacks records for models {sorted(missing)}")
    n = len(validation)
    cert = np.zeros((n, len(key)))
    corr = np.zeros((n, len(key)), dtype=np.uint8)
    for i, rec in enumerate(validation.records):
        for j, mid in enumerate(key):
            out = rec.outputs[mid]
            cert[i, j] = certainty(out.scores)
            corr[i, j] = 1 if out.correct else 0
    validation._matrix_cache[key] = (cert, corr)
    return cert, corr


def encode_cascades(cascades: list[Cascade], profiles: ProfileSet):
    """Pack cascades into the padded integer/float arrays the kernel wants."""
    max_len = max(c.n_stages for c in cascades)
    n = len(cascades)
    stage_model = np.full((n, max_len), -1, dtype=np.int32)
    thresholds = np.zeros((n, max_len), dtype=np.float64)
    n_stages = np.zeros(n, dtype=np.int32)
    for ci, c in enumerate(cascades):
        n_stages[ci] = c.n_stages
        for si, mid in enumerate(c.stages):
            stage_model[ci, si] = profiles.index(mid)
            if si < len(c.thresholds):
                thresholds[ci, si] = c.thresholds[si]
    return stage_model, thresholds, n_stages


def evaluate_cascades(cascades: list[Cascade], validation: ValidationSet,
                      profiles: ProfileSet) -> list[CascadeEval]:
    if not cascades:
        return []
    for c in cascades:
        for mid in c.stages:
            if mid not in profiles:
                raise ValueError(f"cascade stage {mid!r} has no profile")
    cert, corr = matrices(validation, profiles)
    stage_model, thresholds, n_stages = encode_cascades(cascades, profiles)
    cost1 = np.array([profiles[m].runtime_table[1] for m in profiles.model_ids],
                     dtype=np.float64)
    acc, cost, frac = kernels.evaluate_encoded(cert, corr, stage_model,
                                               thresholds, n_stages, cost1)
    out = []
    for ci, c in enumerate(cascades):
        ff = {mid: float(frac[ci, si]) for si, mid in enumerate(c.stages)}
        out.append(CascadeEval(accuracy=float(acc[ci]), mean_cost=float(cost[ci]),
                               forward_fraction=ff))
    return out


def evaluate_cascade(cascade: Cascade, validation: ValidationSet,
                     profiles: ProfileSet) -> CascadeEval:
    return evaluate_cascades([cascade], validation, profiles)[0]


def model_qps_demand(ev: CascadeEval, total_qps: float) -> dict[str, float]:
    """Per-model demand: forward fraction times total cascade QPS."""
    if total_qps < 0:
        raise ValueError(f"total_qps must be >= 0, got {total_qps}")
    return {m: f * total_qps for m, f in ev.forward_fraction.items()}


def pareto_filter(evals: list[tuple[Cascade, CascadeEval]]) -> list[tuple[Cascade, CascadeEval]]:
    """Keep entries no other entry dominates (higher-or-equal accuracy and
    lower-or-equal cost, strict in at least one). Exact ties survive."""
    kept = []
    for c, ev in evals:
        dominated = False
        for _, other in evals:
            if (other.accuracy >= ev.accuracy and other.mean_cost <= ev.mean_cost
                    and (other.accuracy > ev.accuracy or other.mean_cost < ev.mean_cost)):
                dominated = True
                break
        if not dominated:
            kept.append((c, ev))
    return kept


@dataclass(frozen=True)
class ThresholdGrid:
    """Candidate certainty thresholds per model, strictly increasing, starting
    at 0 (threshold 0 = never forward past this stage)."""

    per_model: dict[str, tuple[float, ...]]

    def __post_init__(self) -> None:
        for mid, vals in self.per_model.items():
            if len(vals) == 0:
                raise ValueError(f"{mid}: empty threshold grid")
            if vals[0] != 0.0:
                raise ValueError(f"{mid}: grid must start at 0, got {vals[0]}")
            for a, b in zip(vals, vals[1:]):
                if not b > a:
                    raise ValueError(f"{mid}: grid not strictly increasing at {b}")


def build_threshold_grid(validation: ValidationSet, profiles: ProfileSet,
                         levels: int = 10) -> ThresholdGrid:
    """Per-model grids: the literal 0 plus the empirical certainty quantiles
    k/levels for k = 1..levels-1, deduplicated."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    cert, _ = matrices(validation, profiles)
    qs = [k / levels for k in range(1, levels)]
    per_model = {}
    for j, mid in enumerate(profiles.model_ids):
        quants = np.quantile(cert[:, j], qs)
        vals = sorted({0.0} | {float(q) for q in quants})
        per_model[mid] = tuple(vals)
    return ThresholdGrid(per_model=per_model)


def sample_cascades(profiles: ProfileSet, grid: ThresholdGrid, n_samples: int,
                    rng_seed: int) -> list[Cascade]:
    """Randomly sampled cascades: a random model subset ordered cheap to
    expensive by batch-1 runtime, thresholds drawn from the grid.

    Every single-model cascade is always included (so the cheapest and the
    most accurate model are guaranteed to be available as fallbacks no matter
    what the sampler draws). Duplicates collapse; order is deterministic for a
    fixed seed.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    order = sorted(profiles.model_ids,
                   key=lambda m: (profiles[m].runtime_table[1], profiles.index(m)))
    rng = np.random.default_rng(rng_seed)
    out: list[Cascade] = [Cascade(stages=(m,), thresholds=()) for m in order]
    seen = set(out)
    n_models = len(order)
    for _ in range(n_samples):
        k = int(rng.integers(1, n_models + 1))
        pick = rng.choice(n_models, size=k, replace=False)
        stages = tuple(order[i] for i in sorted(pick))
        thrs = tuple(float(rng.choice(grid.per_model[m])) for m in stages[:-1])
        c = Cascade(stages=stages, thresholds=thrs)
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out
