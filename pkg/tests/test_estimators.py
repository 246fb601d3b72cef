import math

import numpy as np
import pytest

from srbm_rare import _batch, estimators, model, subsolution
from srbm_rare.estimators import (
    InsufficientSamples,
    NonPositiveEstimate,
    SplitConfig,
    clamp_probability_interval,
    decay_rate,
    offspring_thresholds,
    restart_estimate,
    restart_once,
    splitting_estimate,
    splitting_once,
    splitting_value,
    standard_mc,
    statistics,
)
from srbm_rare.simulate import SimConfig
from conftest import scenario_for


@pytest.fixture(scope="module")
def sub_2d(model_2d):
    return subsolution.exact_2d_subsolution(model_2d)


@pytest.fixture(scope="module")
def setup_n5(model_2d, sub_2d):
    n = 5
    return (
        scenario_for(n, [0.1, 0.1]),
        SimConfig(h=1.0 / (1000 * n)),
        SplitConfig(split_r=2, delta=1.0, replications=100),
        sub_2d,
    )


# ---------------------------------------------------------------------------
# statistics helpers


def test_statistics_example():
    mean, se, ci = statistics([0.0, 0.0, 1.0, 1.0])
    assert mean == pytest.approx(0.5)
    assert se == pytest.approx(math.sqrt(1.0 / 3.0) / 2.0, abs=1e-12)
    assert ci[0] == pytest.approx(0.5 - 1.96 * se)
    assert ci[1] == pytest.approx(0.5 + 1.96 * se)
    assert clamp_probability_interval(ci) == (0.0, 1.0)


def test_statistics_constant_samples():
    mean, se, ci = statistics([0.3, 0.3, 0.3])
    assert mean == pytest.approx(0.3)
    assert se == 0.0
    assert ci == (mean, mean)


def test_statistics_single_sample():
    with pytest.raises(InsufficientSamples):
        statistics([1.0])


def test_decay_rate_two_points():
    slope = decay_rate([(10, 5.55e-6), (15, 3.8e-8)])
    assert slope == pytest.approx((math.log(3.8e-8) - math.log(5.55e-6)) / 5.0, abs=1e-12)
    assert slope == pytest.approx(-0.9968, abs=1e-3)


def test_decay_rate_least_squares():
    pts = [(15, 3.796e-8), (20, 2.611e-10), (30, 1.132e-14), (40, 3.146e-19)]
    assert decay_rate(pts) == pytest.approx(-1.02, abs=5e-3)


def test_decay_rate_guards():
    with pytest.raises(NonPositiveEstimate):
        decay_rate([(5, 0.0), (10, 1e-3)])
    with pytest.raises(InsufficientSamples):
        decay_rate([(5, 1e-2), (5, 2e-2)])


def test_offspring_thresholds_rule():
    assert offspring_thresholds(2, 0, 2) == {1: 1, 2: 2}
    assert offspring_thresholds(3, 0, 2) == {1: 2, 2: 6}
    assert offspring_thresholds(4, 1, 1) == {}
    for r in (2, 3, 5):
        for j in range(3):
            for k in range(j + 1, j + 4):
                table = offspring_thresholds(r, j, k)
                assert sum(table.values()) == r ** (k - j) - 1


def test_splitting_value_formula():
    assert splitting_value(2, 2, 3) == pytest.approx(0.75)
    assert splitting_value(2, 0, 1) == pytest.approx(1.0)


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitConfig(split_r=1)
    with pytest.raises(ValueError):
        SplitConfig(delta=0.0)
    with pytest.raises(ValueError):
        SplitConfig(replications=0)


# ---------------------------------------------------------------------------
# reference implementations versus the batched drivers


def test_splitting_engine_matches_reference(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    seed = 314
    l0 = subsolution.level_index(sub, split_config.delta, split_config.split_r, scenario.n, scenario.start)
    chunk = _batch.split_chunk(
        scenario, model_2d, sim_config, split_config, sub, l0, seed, 0, 64
    )
    for rep in range(64):
        rng = _batch.lane_stream(seed, "split", scenario.n, rep)
        value, stats = splitting_once(scenario, model_2d, sim_config, split_config, sub, rng)
        assert chunk["values"][rep] == pytest.approx(value, abs=1e-12)
        assert chunk["particles"][rep] == stats.particles
        assert chunk["timeouts"][rep] == stats.timeouts


def test_restart_engine_matches_reference(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    seed = 2718
    u0 = subsolution.tbar(sub, scenario.start)
    chunk = _batch.restart_chunk(
        scenario, model_2d, sim_config, split_config, sub, u0, seed, 0, 64
    )
    for rep in range(64):
        rng = _batch.lane_stream(seed, "restart", scenario.n, rep)
        value, stats = restart_once(scenario, model_2d, sim_config, split_config, sub, rng)
        assert chunk["values"][rep] == pytest.approx(value, abs=1e-12)
        assert chunk["particles"][rep] == stats.particles


def test_mc_engine_matches_reference(model_2d):
    from srbm_rare.simulate import run_until_stop

    scenario = scenario_for(3, [0.1, 0.1])
    sim_config = SimConfig(h=1.0 / 3000.0)
    seed = 99
    chunk = _batch.mc_chunk(scenario, model_2d, sim_config, seed, 0, 64)
    labels = {0: "A", 1: "B", 2: "timeout"}
    for rep in range(64):
        rng = _batch.lane_stream(seed, "mc", scenario.n, rep)
        out = run_until_stop(scenario, model_2d, sim_config, rng)
        assert labels[int(chunk["hit"][rep])] == out.hit
        assert chunk["steps"][rep] == out.steps


# ---------------------------------------------------------------------------
# estimator behavior


def test_mc_degenerate_scenario_hits_target():
    # Strong drift toward the outer set from just inside it.
    params = model.validate([3.0, 3.0], np.eye(2), np.eye(2))
    scenario = model.Scenario(n=2, epsilon=0.15, start=np.array([0.45, 0.45]))
    report = standard_mc(scenario, params, SimConfig(h=1e-3), 500, seed=1)
    assert report.estimate > 0.95


def test_mc_all_deaths(model_2d):
    scenario = scenario_for(12, [0.1, 0.1])
    report = standard_mc(scenario, model_2d, SimConfig(h=1e-3), 300, seed=2)
    assert report.estimate == 0.0
    assert report.ci95[0] == 0.0


def test_splitting_zero_levels_is_certain(setup_n5, model_2d):
    # A start already inside the target set leaves nothing to branch over:
    # every replication returns 1 from a single particle.
    scenario, sim_config, split_config, sub = setup_n5
    chunk = _batch.split_chunk(
        scenario, model_2d, sim_config, split_config, sub, 0, 1, 0, 8
    )
    assert np.array_equal(chunk["values"], np.ones(8))
    assert np.array_equal(chunk["particles"], np.ones(8, dtype=np.int64))


def test_splitting_single_replication_has_no_se(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    report = splitting_estimate(scenario, model_2d, sim_config, split_config, sub, 1, seed=5)
    assert report.std_error is None
    assert report.ci95 is None
    assert report.replications == 1


def test_estimate_reports_are_deterministic(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    a = splitting_estimate(scenario, model_2d, sim_config, split_config, sub, 200, seed=7)
    b = splitting_estimate(scenario, model_2d, sim_config, split_config, sub, 200, seed=7)
    assert a.estimate == b.estimate
    assert a.std_error == b.std_error
    assert a.particles_mean == b.particles_mean


def test_chunking_does_not_change_results(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    whole = restart_estimate(scenario, model_2d, sim_config, split_config, sub, 150, seed=8)
    pieces = restart_estimate(
        scenario, model_2d, sim_config, split_config, sub, 150, seed=8, chunk=37
    )
    assert whole.estimate == pieces.estimate
    assert whole.particles_max == pieces.particles_max


def test_worker_processes_do_not_change_results(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    one = restart_estimate(
        scenario, model_2d, sim_config, split_config, sub, 120, seed=9, chunk=30, threads=1
    )
    two = restart_estimate(
        scenario, model_2d, sim_config, split_config, sub, 120, seed=9, chunk=30, threads=2
    )
    assert one.estimate == two.estimate
    assert one.particles_mean == two.particles_mean


def test_particle_cap_invalidates_replication(setup_n5, model_2d):
    scenario, sim_config, _, sub = setup_n5
    tight = SplitConfig(split_r=2, delta=1.0, replications=50, particle_cap=2)
    report = restart_estimate(scenario, model_2d, sim_config, tight, sub, 50, seed=10)
    assert report.cap_exceeded > 0
    assert report.replications == 50
    with pytest.raises(estimators.ParticleCapExceeded):
        for rep in range(50):
            rng = _batch.lane_stream(10, "restart", scenario.n, rep)
            restart_once(scenario, model_2d, sim_config, tight, sub, rng)


def test_splitting_conservation_ledger(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    report, ledger = splitting_estimate(
        scenario, model_2d, sim_config, split_config, sub, 300, seed=11, with_ledger=True
    )
    assert report.estimate >= 0
    assert ledger["entered"]
    for level, entered in ledger["entered"].items():
        assert ledger["spawned"][level] == entered * split_config.split_r


def test_restart_offspring_ledger(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    report, ledger = restart_estimate(
        scenario, model_2d, sim_config, split_config, sub, 300, seed=12, with_ledger=True
    )
    assert report.estimate >= 0
    assert ledger["crossings"]
    r = split_config.split_r
    for (j, k), crossings in ledger["crossings"].items():
        assert ledger["offspring"][(j, k)] == crossings * (r ** (k - j) - 1)
        expected = offspring_thresholds(r, j, k)
        for alpha, per_crossing in expected.items():
            assert ledger["thresholds"][(j, k, alpha)] == crossings * per_crossing


def test_report_serialization_fields(setup_n5, model_2d):
    scenario, sim_config, split_config, sub = setup_n5
    report = splitting_estimate(scenario, model_2d, sim_config, split_config, sub, 50, seed=13)
    row = report.to_dict()
    for field in (
        "estimate", "std_error", "ci_lo", "ci_hi", "replications", "timeouts",
        "cap_exceeded", "particles_mean", "particles_std", "particles_max",
        "wall_time", "rel_variance_rate",
    ):
        assert field in row
    assert report.ci95[0] <= report.estimate <= report.ci95[1]
    assert report.particles_max >= report.particles_mean


def test_unbiasedness_smoke(model_2d, sub_2d):
    # Small-scale version of the cross-estimator consistency gate; the
    # acceptance suite runs the full-size comparison.
    n = 2
    scenario = scenario_for(n, [0.1, 0.1])
    sim_config = SimConfig(h=1.0 / (1000 * n))
    split_config = SplitConfig(split_r=2, delta=1.0, replications=2000)
    mc = standard_mc(scenario, model_2d, sim_config, 20000, seed=21)
    sp = splitting_estimate(scenario, model_2d, sim_config, split_config, sub_2d, 2000, seed=21)
    rs = restart_estimate(scenario, model_2d, sim_config, split_config, sub_2d, 2000, seed=21)
    for a, b in ((mc, sp), (mc, rs), (sp, rs)):
        gap = abs(a.estimate - b.estimate)
        assert gap <= 3.0 * math.hypot(a.std_error, b.std_error)
