import math

import numpy as np
import pytest

from srbm_rare import _batch, model, simulate
from srbm_rare.simulate import (
    HIT_A,
    HIT_B,
    HIT_STOPPED,
    PathOutcome,
    SimConfig,
    gaussian_step,
    run_segment,
    run_until_stop,
)
from srbm_rare.skorokhod import regulate_path
from conftest import scenario_for


class ZeroRng:
    """Stub generator: all increments reduce to pure drift."""

    def standard_normal(self, size=None):
        if size is None:
            return 0.0
        return np.zeros(size)


class ReplayRng:
    """Replays a recorded sequence of standard normal draws."""

    def __init__(self, draws):
        self.draws = np.asarray(draws, dtype=float)
        self.cursor = 0

    def standard_normal(self, size=None):
        if size is None:
            out = self.draws.flat[self.cursor]
            self.cursor += 1
            return out
        count = int(np.prod(size))
        out = self.draws.flat[self.cursor : self.cursor + count].reshape(size)
        self.cursor += count
        return out.copy()


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(h=0.0)
    with pytest.raises(ValueError):
        SimConfig(h=0.1, max_steps=0)


def test_gaussian_step_pure_drift(model_2d):
    inc = gaussian_step(model_2d, 0.01, 5, ZeroRng())
    assert np.allclose(inc, model_2d.theta * 0.01, atol=1e-15)


def test_gaussian_step_empirical_covariance(model_3d):
    rng = np.random.default_rng(11)
    h, n = 1.0, 1
    draws = np.array([gaussian_step(model_3d, h, n, rng) for _ in range(100_000)])
    emp = np.cov((draws - model_3d.theta * h).T)
    assert np.abs(emp - model_3d.sigma).max() / np.abs(model_3d.sigma).max() < 0.03


def test_gaussian_step_variance_scales_with_h(model_2d):
    rng = np.random.default_rng(12)
    var = {}
    for h in (0.02, 0.01):
        draws = np.array([gaussian_step(model_2d, h, 1, rng) for _ in range(40_000)])
        var[h] = (draws - model_2d.theta * h).var(axis=0).mean()
    assert var[0.01] / var[0.02] == pytest.approx(0.5, abs=0.03)


def test_fluid_path_slides_to_inner_set(model_2d):
    # With the noise stubbed out, the path drifts to the face {z_0 = 0} at
    # time 0.05, then the pushing rate 2 makes the second coordinate fall at
    # unit speed until absorption in the inner set.
    scenario = model.Scenario(n=5, epsilon=0.15, start=np.array([0.1, 0.1]))
    config = SimConfig(h=1e-3)
    out = run_until_stop(scenario, model_2d, config, ZeroRng())
    assert out.hit == HIT_A
    assert out.exit_point[0] == pytest.approx(0.0, abs=1e-9)
    assert out.exit_point.sum() == pytest.approx(scenario.a_level, abs=2e-3)
    # Face reached at t = 0.05, slide covers 0.15 - 0.03 at unit speed.
    assert out.elapsed == pytest.approx(0.05 + 0.12, abs=5e-3)
    assert out.steps == out.elapsed / config.h


def test_run_until_stop_rejects_bad_start(model_2d):
    scenario = model.Scenario(n=5, epsilon=0.15, start=np.array([0.1, 0.1]))
    bad = PathOutcome(hit=HIT_B, exit_point=np.array([1.2, 0.0]), steps=0, elapsed=0.0)
    assert bad.hit == HIT_B  # silence unused warning
    with pytest.raises(model.ModelError):
        model.Scenario(n=5, epsilon=0.15, start=np.array([0.9, 0.2]))
    object.__setattr__(scenario, "start", np.array([0.9, 0.2]))
    with pytest.raises(ValueError):
        run_until_stop(scenario, model_2d, SimConfig(h=1e-3), ZeroRng())


def test_run_segment_immediate_predicate(model_2d):
    out = run_segment(
        np.array([0.1, 0.1]), model_2d, SimConfig(h=1e-3), 5, lambda z: True, ZeroRng()
    )
    assert out.steps == 0
    assert out.hit == HIT_STOPPED
    assert np.array_equal(out.exit_point, [0.1, 0.1])


def test_run_segment_equals_run_until_stop(model_2d):
    scenario = scenario_for(7, [0.1, 0.1])
    config = SimConfig(h=1e-3)
    rng_a = _batch.lane_stream(3, "mc", 7, 0)
    rng_b = _batch.lane_stream(3, "mc", 7, 0)
    full = run_until_stop(scenario, model_2d, config, rng_a)

    def pred(z):
        s = float(z.sum())
        return s <= scenario.a_level or s >= scenario.b_level

    seg = run_segment(scenario.start, model_2d, config, 7, pred, rng_b)
    assert seg.steps == full.steps
    assert np.array_equal(seg.exit_point, full.exit_point)


def test_run_segment_replay_is_reproducible(model_2d):
    rng = np.random.default_rng(21)
    draws = rng.standard_normal(4000)
    config = SimConfig(h=1e-3)

    def pred(z):
        return float(z.sum()) >= 0.35

    first = run_segment(np.array([0.1, 0.1]), model_2d, config, 5, pred, ReplayRng(draws))
    second = run_segment(np.array([0.1, 0.1]), model_2d, config, 5, pred, ReplayRng(draws))
    assert first.steps == second.steps
    assert np.array_equal(first.exit_point, second.exit_point)


def test_timeout_outcome(model_2d):
    out = run_segment(
        np.array([0.1, 0.1]), model_2d, SimConfig(h=1e-6, max_steps=50), 5,
        lambda z: False, np.random.default_rng(0),
    )
    assert out.hit == "timeout"
    assert out.steps == 50


def test_positions_stay_nonnegative(model_2d):
    rng = np.random.default_rng(33)
    seen = []

    def pred(z):
        seen.append(z.copy())
        return len(seen) >= 2000

    run_segment(np.array([0.05, 0.05]), model_2d, SimConfig(h=2e-4), 5, pred, rng)
    assert (np.array(seen) >= 0).all()


def test_determinism_same_seed(model_2d):
    scenario = scenario_for(5, [0.1, 0.1])
    config = SimConfig(h=2e-4)
    a = run_until_stop(scenario, model_2d, config, _batch.lane_stream(9, "mc", 5, 4))
    b = run_until_stop(scenario, model_2d, config, _batch.lane_stream(9, "mc", 5, 4))
    assert a.steps == b.steps and a.hit == b.hit
    assert np.array_equal(a.exit_point, b.exit_point)


def test_path_coupling_with_regulated_driver(model_2d):
    # Same noise, zero drift: stepping with reflection must agree with the
    # whole-path regulation of the accumulated driver.
    params = model.validate([0.0, 0.0], model_2d.sigma, model_2d.refl)
    steps = 400
    h, n = 1e-3, 5
    rng = np.random.default_rng(44)
    draws = rng.standard_normal((steps, 2))
    scale = math.sqrt(h / n)
    start = np.array([0.05, 0.02])
    driver = np.vstack([start, start + np.cumsum(draws * scale, axis=0)])
    phi, _ = regulate_path(driver, params)

    count = 0

    def pred(z):
        # Called once at the start and once after each step.
        nonlocal count
        count += 1
        return count > steps

    out = run_segment(start, params, SimConfig(h=h), n, pred, ReplayRng(draws))
    assert out.steps == steps
    assert np.abs(out.exit_point - phi[-1]).max() < 1e-9


def test_one_dimensional_hitting_probability(model_1d):
    # Drift toward the upper barrier: the crossing probability of the
    # unreflected diffusion has the classical two-barrier closed form
    # (1 - exp(-g(z-a))) / (1 - exp(-g(b-a))) with g = 2 theta / sigma.
    params = model.validate([0.5], [[1.0]], [[1.0]])
    epsilon, n = 0.2, 1
    scenario = model.Scenario(n=n, epsilon=epsilon, start=np.array([0.5]))
    gamma = 2.0 * 0.5 / 1.0
    a, b, z = epsilon / n, 1.0, 0.5
    exact = (1.0 - math.exp(-gamma * (z - a))) / (1.0 - math.exp(-gamma * (b - a)))
    from srbm_rare import estimators

    report = estimators.standard_mc(scenario, params, SimConfig(h=2e-4), 100_000, seed=77)
    # Allow the mild step-discretization bias on top of three standard errors.
    tol = 3 * report.std_error + 0.6 * math.sqrt(2e-4)
    assert report.estimate == pytest.approx(exact, abs=tol)
    assert report.timeouts == 0
