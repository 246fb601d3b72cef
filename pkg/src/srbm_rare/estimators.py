"""Estimators: standard Monte Carlo, fixed-factor level splitting, and RESTART.

Each estimator averages independent replications; a replication owns the
counter-based stream keyed by ``(seed, algorithm, n, replication)``, so
estimates are reproducible and independent of worker scheduling.  The
splitting and RESTART replications run a branching particle system whose
levels come from a subsolution of the variational problem.

Readable single-replication reference implementations (``splitting_once``,
``restart_once``) are kept alongside the batched production path and consume
replication streams identically, which the test suite exploits to
cross-validate the vectorized drivers.
"""

from __future__ import annotations

from dataclasses import dataclass

import math
import time

import numpy as np

from . import _batch
from .model import ModelParams, Scenario
from .simulate import SimConfig, gaussian_step
from .skorokhod import reflect_step
from .subsolution import Subsolution, importance_value, level_index, tbar


class InsufficientSamples(ValueError):
    """Too few samples for the requested statistic."""


class NonPositiveEstimate(ValueError):
    """Log-scale fitting requires strictly positive estimates."""


class ParticleCapExceeded(RuntimeError):
    """A replication exceeded the live-particle cap and was invalidated."""


@dataclass(frozen=True)
class SplitConfig:
    """Branching factor, level parameter, replication count, particle cap."""

    split_r: int = 2
    delta: float = 1.0
    replications: int = 1000
    particle_cap: int = 1_000_000

    def __post_init__(self):
        if self.split_r < 2 or int(self.split_r) != self.split_r:
            raise ValueError(f"split factor must be an integer >= 2, got {self.split_r}")
        if not (0.0 < self.delta <= 1.0):
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.replications < 1:
            raise ValueError("replication count must be at least 1")
        if self.particle_cap < 1:
            raise ValueError("particle cap must be at least 1")


@dataclass(frozen=True)
class ParticleStats:
    """Per-replication particle accounting from one branching replication."""

    particles: int
    timeouts: int
    capped: bool


@dataclass(frozen=True)
class EstimateReport:
    """Estimate with uncertainty and work statistics across replications."""

    estimate: float
    std_error: float | None
    ci95: tuple[float, float] | None
    replications: int
    timeouts: int
    cap_exceeded: int
    particles_mean: float
    particles_std: float
    particles_max: int
    wall_time: float
    rel_variance_rate: float | None

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "std_error": self.std_error,
            "ci_lo": None if self.ci95 is None else self.ci95[0],
            "ci_hi": None if self.ci95 is None else self.ci95[1],
            "replications": self.replications,
            "timeouts": self.timeouts,
            "cap_exceeded": self.cap_exceeded,
            "particles_mean": self.particles_mean,
            "particles_std": self.particles_std,
            "particles_max": self.particles_max,
            "wall_time": self.wall_time,
            "rel_variance_rate": self.rel_variance_rate,
        }


def statistics(samples):
    """Sample mean, standard error, and normal 95% interval.

    Standard error uses the n-1 denominator.  Raises InsufficientSamples
    below two samples.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {samples.size}")
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(samples.size))
    ci = (mean - 1.96 * se, mean + 1.96 * se)
    return mean, se, ci


def clamp_probability_interval(ci):
    """Clamp a confidence interval to the unit interval (probabilities)."""
    return (min(max(ci[0], 0.0), 1.0), min(max(ci[1], 0.0), 1.0))


def decay_rate(reports):
    """Least-squares slope of log(estimate) against the scale parameter.

    ``reports`` is an iterable of (n, estimate) pairs; at least two distinct
    n values with positive estimates are required.
    """
    pairs = [(float(n), float(est)) for n, est in reports]
    if any(est <= 0 for _, est in pairs):
        raise NonPositiveEstimate("all estimates must be positive for a log fit")
    ns = np.array([n for n, _ in pairs])
    if np.unique(ns).size < 2:
        raise InsufficientSamples("need at least two distinct scales")
    logs = np.log(np.array([est for _, est in pairs]))
    slope, _ = np.polyfit(ns, logs, 1)
    return float(slope)


def offspring_thresholds(split_r: int, j: int, k: int) -> dict[int, int]:
    """RESTART offspring counts by killing threshold for a j -> k crossing.

    Returns ``{alpha: (r-1) r**(alpha-j-1)}`` for j < alpha <= k; the counts
    sum to ``r**(k-j) - 1``.
    """
    if k <= j:
        return {}
    return {
        alpha: (split_r - 1) * split_r ** (alpha - j - 1) for alpha in range(j + 1, k + 1)
    }


def splitting_value(split_r: int, l0: int, n_final: int) -> float:
    """Estimator value: final-generation count scaled by the branching factor."""
    return float(split_r) ** (-l0) * n_final


def _finalize(values, particles, timeout_events, capped, n, wall) -> EstimateReport:
    values = np.asarray(values, dtype=float)
    valid = ~np.isnan(values)
    vals = values[valid]
    estimate = float(vals.mean()) if vals.size else 0.0
    if vals.size >= 2:
        _, se, ci = statistics(vals)
        ci = clamp_probability_interval(ci)
        if estimate > ci[1]:  # estimates above 1 are kept unclamped
            ci = (ci[0], estimate)
    else:
        se, ci = None, None
    parts = np.asarray(particles, dtype=float)[valid]
    if parts.size:
        p_mean = float(parts.mean())
        p_std = float(parts.std(ddof=1)) if parts.size >= 2 else 0.0
        p_max = int(parts.max())
    else:
        p_mean, p_std, p_max = 0.0, 0.0, 0
    second = float((vals**2).mean()) if vals.size else 0.0
    rate = -math.log(second) / n if second > 0 else None
    return EstimateReport(
        estimate=estimate,
        std_error=se,
        ci95=ci,
        replications=int(values.size),
        timeouts=int((np.asarray(timeout_events) > 0).sum()),
        cap_exceeded=int(np.asarray(capped).sum()),
        particles_mean=p_mean,
        particles_std=p_std,
        particles_max=p_max,
        wall_time=wall,
        rel_variance_rate=rate,
    )


def _chunk_ranges(reps: int, chunk: int):
    return [(lo, min(lo + chunk, reps)) for lo in range(0, reps, chunk)]


# ---------------------------------------------------------------------------
# standard Monte Carlo


def standard_mc(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    reps: int,
    seed: int,
    threads: int = 1,
    chunk: int = _batch.DEFAULT_CHUNK,
) -> EstimateReport:
    """Fraction of replications that reach the outer set first.

    Timed-out replications contribute zero to the numerator and are
    reported separately.
    """
    start = time.perf_counter()
    payloads = [
        ("mc", scenario, params, sim_config, seed, lo, hi)
        for lo, hi in _chunk_ranges(reps, chunk)
    ]
    results = _batch.run_chunked(payloads, threads)
    hit = np.concatenate([res["hit"] for res in results])
    values = (hit == 1).astype(float)
    timeout_events = (hit == 2).astype(np.int64)
    wall = time.perf_counter() - start
    return _finalize(
        values, np.ones(reps), timeout_events, np.zeros(reps, bool), scenario.n, wall
    )


# ---------------------------------------------------------------------------
# splitting


def splitting_once(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    split_config: SplitConfig,
    sub: Subsolution,
    rng,
):
    """One splitting replication (reference implementation).

    Returns ``(value, ParticleStats)``.  Raises ParticleCapExceeded when the
    live-particle cap is hit.
    """
    n = scenario.n
    r_split = split_config.split_r
    delta = split_config.delta
    l0 = level_index(sub, delta, r_split, n, scenario.start)
    if l0 <= 0:
        return 1.0, ParticleStats(particles=1, timeouts=0, capped=False)
    a_level = scenario.a_level
    b_level = scenario.b_level
    h = sim_config.h

    def member(z: np.ndarray, t: int) -> bool:
        if t == 0:
            return float(z.sum()) >= b_level
        return importance_value(sub, delta, r_split, z) <= (t - 1) * delta / n

    stack = [(np.asarray(scenario.start, dtype=float), l0 - 1)]
    n_final = 0
    particles = 0
    timeouts = 0
    while stack:
        y, t = stack.pop()
        if len(stack) + 1 > split_config.particle_cap:
            raise ParticleCapExceeded(f"live particles exceeded {split_config.particle_cap}")
        steps = 0
        z = y.copy()
        fired = member(z, t) or float(z.sum()) <= a_level
        while not fired:
            w = z + gaussian_step(params, h, n, rng)
            z = reflect_step(w, params).z
            steps += 1
            if member(z, t) or float(z.sum()) <= a_level:
                fired = True
            elif steps >= sim_config.max_steps:
                break
        if steps > 0:
            particles += 1
        if not fired:
            timeouts += 1
            continue
        if member(z, t):
            if t == 0:
                n_final += r_split
            else:
                for _ in range(r_split):
                    stack.append((z.copy(), t - 1))
    return (
        splitting_value(r_split, l0, n_final),
        ParticleStats(particles=particles, timeouts=timeouts, capped=False),
    )


def splitting_estimate(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    split_config: SplitConfig,
    sub: Subsolution,
    reps: int,
    seed: int,
    threads: int = 1,
    chunk: int = _batch.DEFAULT_CHUNK,
    with_ledger: bool = False,
):
    """Average of independent splitting replications, with work statistics."""
    start = time.perf_counter()
    l0 = level_index(sub, split_config.delta, split_config.split_r, scenario.n, scenario.start)
    payloads = [
        ("split", scenario, params, sim_config, split_config, sub, l0, seed, lo, hi, with_ledger)
        for lo, hi in _chunk_ranges(reps, chunk)
    ]
    results = _batch.run_chunked(payloads, threads)
    values = np.concatenate([res["values"] for res in results])
    particles = np.concatenate([res["particles"] for res in results])
    timeout_events = np.concatenate([res["timeouts"] for res in results])
    capped = np.concatenate([res["capped"] for res in results])
    wall = time.perf_counter() - start
    report = _finalize(values, particles, timeout_events, capped, scenario.n, wall)
    if with_ledger:
        return report, _batch._merge_ledgers([res["ledger"] for res in results])
    return report


# ---------------------------------------------------------------------------
# RESTART


def restart_once(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    split_config: SplitConfig,
    sub: Subsolution,
    rng,
):
    """One RESTART replication (reference implementation).

    Returns ``(value, ParticleStats)``.
    """
    n = scenario.n
    r_split = split_config.split_r
    log_r = math.log(r_split)
    u0 = tbar(sub, scenario.start)
    a_level = scenario.a_level
    b_level = scenario.b_level
    h = sim_config.h

    def region_of(z: np.ndarray) -> int:
        return max(0, int(math.floor(n * (u0 - tbar(sub, z)) / log_r)))

    stack = [(np.asarray(scenario.start, dtype=float), 0, 0)]
    contrib = 0.0
    particles = 0
    timeouts = 0
    while stack:
        y, thr, j = stack.pop()
        if len(stack) + 1 > split_config.particle_cap:
            raise ParticleCapExceeded(f"live particles exceeded {split_config.particle_cap}")
        particles += 1
        z = y.copy()
        steps = 0
        while True:
            w = z + gaussian_step(params, h, n, rng)
            z = reflect_step(w, params).z
            steps += 1
            total = float(z.sum())
            k = region_of(z)
            if total >= b_level:
                mult = r_split ** (k - j) if k > j else 1
                contrib += mult * float(r_split) ** (-k)
                break
            if total <= a_level:
                break
            if steps >= sim_config.max_steps:
                timeouts += 1
                break
            if k < thr:
                break
            if k > j:
                for alpha in range(j + 1, k + 1):
                    cnt = (r_split - 1) * r_split ** (alpha - j - 1)
                    for _ in range(cnt):
                        stack.append((z.copy(), alpha, k))
                j = k
            else:
                j = k
    return contrib, ParticleStats(particles=particles, timeouts=timeouts, capped=False)


def restart_estimate(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    split_config: SplitConfig,
    sub: Subsolution,
    reps: int,
    seed: int,
    threads: int = 1,
    chunk: int = _batch.DEFAULT_CHUNK,
    with_ledger: bool = False,
):
    """Average of independent RESTART replications, with work statistics."""
    start = time.perf_counter()
    u0 = tbar(sub, scenario.start)
    payloads = [
        ("restart", scenario, params, sim_config, split_config, sub, u0, seed, lo, hi, with_ledger)
        for lo, hi in _chunk_ranges(reps, chunk)
    ]
    results = _batch.run_chunked(payloads, threads)
    values = np.concatenate([res["values"] for res in results])
    particles = np.concatenate([res["particles"] for res in results])
    timeout_events = np.concatenate([res["timeouts"] for res in results])
    capped = np.concatenate([res["capped"] for res in results])
    wall = time.perf_counter() - start
    report = _finalize(values, particles, timeout_events, capped, scenario.n, wall)
    if with_ledger:
        return report, _batch._merge_ledgers([res["ledger"] for res in results])
    return report
