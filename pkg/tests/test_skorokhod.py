import numpy as np
import pytest

from srbm_rare import model, skorokhod
from srbm_rare.skorokhod import (
    get_reflector,
    reflect_step,
    reflect_step_oracle,
    regulate_path,
)


def random_m_matrix_params(rng, d):
    a = rng.uniform(0.0, 1.0, size=(d, d))
    mu = np.abs(np.linalg.eigvals(a)).max() + rng.uniform(0.1, 1.0)
    refl = mu * np.eye(d) - a
    w = rng.standard_normal((d, d))
    sigma = w @ w.T + d * np.eye(d)
    theta = -rng.uniform(0.2, 2.0, size=d)
    return model.validate(theta, sigma, refl)


def assert_reflect_invariants(w, res, params, tol=1e-10):
    assert (res.z >= 0).all()
    assert (res.dy >= 0).all()
    assert np.abs(res.z - (w + params.refl @ res.dy)).max() < tol
    assert np.abs(res.z * res.dy).max() < tol


def test_interior_point_unchanged(model_2d):
    res = reflect_step([0.5, 0.3], model_2d)
    assert np.array_equal(res.z, [0.5, 0.3])
    assert np.array_equal(res.dy, [0.0, 0.0])


def test_identity_reflection_is_projection():
    params = model.validate([-1.0, -1.0], np.eye(2), np.eye(2))
    res = reflect_step([-0.5, 0.3], params)
    assert np.allclose(res.z, [0.0, 0.3])
    assert np.allclose(res.dy, [0.5, 0.0])


def test_oblique_two_face_push(model_2d):
    # Active set {0} alone leaves z_1 = 0.3 - 0.5 < 0, so both faces push:
    # solving R dy = (0.5, -0.3) gives dy = (0.5, 0.2) and z = 0.
    res = reflect_step([-0.5, 0.3], model_2d)
    assert np.allclose(res.z, [0.0, 0.0], atol=1e-12)
    assert np.allclose(res.dy, [0.5, 0.2], atol=1e-12)
    assert_reflect_invariants(np.array([-0.5, 0.3]), res, model_2d)


def test_oracle_matches_on_examples(model_2d):
    for w in ([0.5, 0.3], [-0.5, 0.3], [-0.2, -0.4]):
        a = reflect_step(w, model_2d)
        b = reflect_step_oracle(w, model_2d)
        assert np.allclose(a.z, b.z, atol=1e-12)
        assert np.allclose(a.dy, b.dy, atol=1e-12)


def test_nonnegative_point_needs_no_push(model_3d):
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = rng.uniform(0.0, 1.0, size=3)
        res = reflect_step_oracle(w, model_3d)
        assert np.array_equal(res.dy, np.zeros(3))
        assert np.array_equal(res.z, w)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_oracle_agreement_random_m_matrices(d):
    # Production vs exhaustive solver on random instances; part of the
    # correctness gate (the full count runs in the acceptance suite).
    rng = np.random.default_rng(100 + d)
    params = random_m_matrix_params(rng, d)
    for _ in range(500):
        w = rng.standard_normal(d) * rng.uniform(0.1, 2.0)
        a = reflect_step(w, params)
        b = reflect_step_oracle(w, params)
        assert np.abs(a.z - b.z).max() < 1e-9
        assert np.abs(a.dy - b.dy).max() < 1e-9
        assert_reflect_invariants(w, a, params)


def test_reflect_many_matches_scalar(model_3d):
    rng = np.random.default_rng(9)
    w = rng.standard_normal((500, 3)) * 0.5
    reflector = get_reflector(model_3d.refl)
    z_batch, dy_batch = reflector.reflect_many(w, want_dy=True)
    for i in range(w.shape[0]):
        res = reflect_step(w[i], model_3d)
        assert np.abs(z_batch[i] - res.z).max() < 1e-12
        assert np.abs(dy_batch[i] - res.dy).max() < 1e-12


def test_lemke_matches_enumeration_d5():
    rng = np.random.default_rng(7)
    params = random_m_matrix_params(rng, 5)
    for _ in range(200):
        w = rng.standard_normal(5) * rng.uniform(0.1, 2.0)
        a = skorokhod._lemke(w, params.refl)  # production path for d=5
        b = reflect_step_oracle(w, params)
        assert np.abs(a.z - b.z).max() < 1e-8
        assert np.abs(a.dy - b.dy).max() < 1e-8


def one_sided_reflection(driver):
    """Closed-form one-dimensional regulation of a scalar driver."""
    driver = np.asarray(driver, dtype=float)
    running = np.maximum.accumulate(-driver)
    eta = np.maximum(running, 0.0)
    return driver + eta, eta


def test_regulate_path_1d_example(model_1d):
    phi, eta = regulate_path([0.0, -1.0, -0.5, -2.0], model_1d)
    assert np.allclose(phi, [0.0, 0.0, 0.5, 0.0], atol=1e-12)
    assert np.allclose(eta, [0.0, 1.0, 1.0, 2.0], atol=1e-12)


def test_regulate_path_1d_closed_form(model_1d):
    rng = np.random.default_rng(123)
    for _ in range(100):
        driver = np.concatenate([[rng.uniform(0, 1)], rng.standard_normal(200)]).cumsum()
        driver[0] = abs(driver[0])
        phi, eta = regulate_path(driver, model_1d)
        phi_ref, eta_ref = one_sided_reflection(driver)
        assert np.abs(phi - phi_ref).max() < 1e-12
        assert np.abs(eta - eta_ref).max() < 1e-12


def test_regulate_path_monotone_driver_untouched(model_2d):
    driver = np.cumsum(np.full((50, 2), 0.01), axis=0)
    phi, eta = regulate_path(driver, model_2d)
    # phi re-accumulates the increments, so agreement is to rounding only.
    assert np.abs(phi - driver).max() < 1e-12
    assert np.array_equal(eta, np.zeros_like(driver))


def test_regulate_path_stepwise_invariants(model_3d):
    rng = np.random.default_rng(5)
    driver = np.vstack([rng.uniform(0, 0.5, 3), rng.standard_normal((300, 3)) * 0.2]).cumsum(axis=0)
    driver[0] = np.abs(driver[0])
    phi, eta = regulate_path(driver, model_3d)
    assert (phi >= 0).all()
    d_eta = np.diff(eta, axis=0)
    assert (d_eta >= 0).all()
    recon = phi[:-1] + np.diff(driver, axis=0) + d_eta @ model_3d.refl.T
    assert np.abs(phi[1:] - recon).max() < 1e-10
    assert np.abs(phi[1:] * d_eta).max() < 1e-10


def test_regulate_path_scaling_homogeneity(model_2d):
    rng = np.random.default_rng(17)
    driver = np.vstack([rng.uniform(0, 0.5, 2), rng.standard_normal((120, 2)) * 0.3]).cumsum(axis=0)
    driver[0] = np.abs(driver[0])
    phi, eta = regulate_path(driver, model_2d)
    for c in (0.5, 3.0):
        phi_c, eta_c = regulate_path(c * driver, model_2d)
        assert np.abs(phi_c - c * phi).max() < 1e-9
        assert np.abs(eta_c - c * eta).max() < 1e-9


def test_regulate_path_rejects_negative_start(model_2d):
    with pytest.raises(ValueError):
        regulate_path(np.array([[-0.1, 0.2], [0.0, 0.0]]), model_2d)


def test_reflector_deterministic_tie_break():
    # Completely-S but not M: several active sets can be feasible; the
    # smallest (then lexicographically first) must win every time.
    params = model.validate([-1.0, -1.0], np.eye(2), [[1.0, 2.0], [2.0, 1.0]])
    res1 = reflect_step([-0.3, -0.3], params)
    res2 = reflect_step([-0.3, -0.3], params)
    assert np.array_equal(res1.z, res2.z)
    assert np.array_equal(res1.dy, res2.dy)
    assert_reflect_invariants(np.array([-0.3, -0.3]), res1, params, tol=1e-9)


def test_reflect_step_rejects_nonfinite(model_2d):
    with pytest.raises(ValueError):
        reflect_step([np.nan, 0.0], model_2d)
