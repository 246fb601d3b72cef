"""Rare-event estimation for reflecting Brownian motions in the nonnegative orthant.

The package simulates Euler-discretized reflecting Brownian motion confined to
the orthant by an oblique pushing mechanism, and estimates the probability that
the scaled process reaches the far boundary ``{sum(z) >= 1}`` before a small
neighborhood of the origin.  Importance functions built from the associated
variational problem drive fixed-factor level splitting and RESTART estimators.
"""

__version__ = "0.1.0"

from .model import ModelParams, Scenario, validate, check_2d_recurrence
from .skorokhod import ReflectResult, reflect_step, reflect_step_oracle, regulate_path
from .simulate import SimConfig, PathOutcome, gaussian_step, run_until_stop, run_segment
from .varprob import (
    Vp2dSolution,
    LocalCost,
    solve_vp_2d,
    vp2d_cost,
    infimum_over_B_2d,
    local_cost,
    local_cost_direction,
)
from .subsolution import (
    Subsolution,
    direction_grid,
    compute_scaling_r,
    tbar,
    subsolution_inequality_check,
    importance_value,
    level_index,
    exact_2d_subsolution,
    scaled_l1_subsolution,
)
from .estimators import (
    SplitConfig,
    EstimateReport,
    standard_mc,
    splitting_once,
    splitting_estimate,
    restart_once,
    restart_estimate,
    statistics,
    decay_rate,
)

__all__ = [
    "ModelParams",
    "Scenario",
    "validate",
    "check_2d_recurrence",
    "ReflectResult",
    "reflect_step",
    "reflect_step_oracle",
    "regulate_path",
    "SimConfig",
    "PathOutcome",
    "gaussian_step",
    "run_until_stop",
    "run_segment",
    "Vp2dSolution",
    "LocalCost",
    "solve_vp_2d",
    "vp2d_cost",
    "infimum_over_B_2d",
    "local_cost",
    "local_cost_direction",
    "Subsolution",
    "direction_grid",
    "compute_scaling_r",
    "tbar",
    "subsolution_inequality_check",
    "importance_value",
    "level_index",
    "exact_2d_subsolution",
    "scaled_l1_subsolution",
    "SplitConfig",
    "EstimateReport",
    "standard_mc",
    "splitting_once",
    "splitting_estimate",
    "restart_once",
    "restart_estimate",
    "statistics",
    "decay_rate",
    "__version__",
]
