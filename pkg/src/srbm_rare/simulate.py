"""Euler simulation of the scaled reflected diffusion until a stopping set is hit.

The simulation runs on the scaled clock: positions are the scaled process
directly, each step advances scaled time by h, and the per-step Gaussian
increment has mean ``theta * h`` and covariance ``sigma * h / n``.  After
every increment the position is reflected back into the orthant, then the
stopping rule is evaluated on the reflected point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, Scenario
from .skorokhod import reflect_step

DEFAULT_MAX_STEPS = 100_000_000

HIT_A = "A"
HIT_B = "B"
HIT_TIMEOUT = "timeout"
HIT_STOPPED = "stopped"


@dataclass(frozen=True)
class SimConfig:
    """Step size (scaled clock), hard step cap, and base seed."""

    h: float
    max_steps: int = DEFAULT_MAX_STEPS
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError(f"step size must be positive, got {self.h}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be at least 1, got {self.max_steps}")


@dataclass(frozen=True, eq=False)
class PathOutcome:
    """Terminal state of one simulated path segment."""

    hit: str  # HIT_A | HIT_B | HIT_TIMEOUT | HIT_STOPPED
    exit_point: np.ndarray
    steps: int
    elapsed: float  # scaled time, steps * h


def gaussian_step(params: ModelParams, h: float, n: int, rng) -> np.ndarray:
    """One Euler increment of the scaled driving process.

    Drift ``theta * h`` plus correlated noise with covariance
    ``sigma * h / n``.
    """
    g = rng.standard_normal(params.d)
    return params.theta * h + (params.sigma_chol @ g) * np.sqrt(h / n)


def run_segment(
    start,
    params: ModelParams,
    sim_config: SimConfig,
    n: int,
    stop_pred,
    rng,
) -> PathOutcome:
    """Step until the caller-supplied predicate fires on a reflected point.

    The predicate is also evaluated on the starting point, so a segment can
    legitimately terminate after zero steps.  Reaching the step cap yields a
    timeout outcome.
    """
    z = np.asarray(start, dtype=float).copy()
    if stop_pred(z):
        return PathOutcome(hit=HIT_STOPPED, exit_point=z, steps=0, elapsed=0.0)
    h = sim_config.h
    for k in range(1, sim_config.max_steps + 1):
        w = z + gaussian_step(params, h, n, rng)
        z = reflect_step(w, params).z
        if stop_pred(z):
            return PathOutcome(hit=HIT_STOPPED, exit_point=z, steps=k, elapsed=k * h)
    return PathOutcome(
        hit=HIT_TIMEOUT,
        exit_point=z,
        steps=sim_config.max_steps,
        elapsed=sim_config.max_steps * h,
    )


def classify_exit(scenario: Scenario, outcome: PathOutcome) -> PathOutcome:
    """Relabel a stopped segment as an inner- or outer-set hit."""
    if outcome.hit != HIT_STOPPED:
        return outcome
    total = float(outcome.exit_point.sum())
    if total >= scenario.b_level:
        hit = HIT_B
    elif total <= scenario.a_level:
        hit = HIT_A
    else:
        hit = HIT_STOPPED
    return PathOutcome(
        hit=hit,
        exit_point=outcome.exit_point,
        steps=outcome.steps,
        elapsed=outcome.elapsed,
    )


def run_until_stop(
    scenario: Scenario,
    params: ModelParams,
    sim_config: SimConfig,
    rng,
) -> PathOutcome:
    """Simulate from the scenario start until either stopping set is entered."""
    start = np.asarray(scenario.start, dtype=float)
    total = float(start.sum())
    if not (scenario.a_level < total < scenario.b_level):
        raise ValueError(
            f"start must lie strictly between the stopping sets, sum={total}"
        )
    a_level = scenario.a_level
    b_level = scenario.b_level

    def hit_either(z: np.ndarray) -> bool:
        s = float(z.sum())
        return s <= a_level or s >= b_level

    outcome = run_segment(start, params, sim_config, scenario.n, hit_either, rng)
    return classify_exit(scenario, outcome)
