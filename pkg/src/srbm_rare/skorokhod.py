"""One-step orthant reflection and discrete path regulation.

A point pushed outside the orthant is projected back by solving the linear
complementarity problem

    z = w + R dy,   z >= 0,   dy >= 0,   z . dy = 0,

which is the single-step form of the reflection mechanism.  Whole
piecewise-constant driving paths are regulated by chaining these solves.

The production solver enumerates candidate active sets in ascending size
(exact and fast at the small dimensions this package targets) and falls back
to complementary pivoting for larger systems.  A deliberately naive
exhaustive solver is kept alongside as an independent test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .model import ModelParams

FEAS_TOL = 1e-12
_ENUM_MAX_DIM = 4  # active-set enumeration below this size, pivoting above


class NoSolution(RuntimeError):
    """No active set yields a feasible complementary solution.

    Cannot occur for a completely-S reflection matrix; reaching this signals
    numerical breakdown.
    """


@dataclass(frozen=True, eq=False)
class ReflectResult:
    """Reflected point and the pushing increment that produced it."""

    z: np.ndarray
    dy: np.ndarray


def _ordered_subsets(d: int):
    """All index subsets in ascending size, lexicographic within size."""
    for k in range(d + 1):
        yield from combinations(range(d), k)


class OrthantReflector:
    """Precompiled one-step reflector for a fixed reflection matrix.

    For each candidate active set J the maps

        z  = w - R[:, J] @ inv(R[J, J]) @ w[J]
        dy = -inv(R[J, J]) @ w[J]           (on J; zero elsewhere)

    are affine in w, so candidates can be evaluated for whole batches of
    points at once.  The first feasible candidate in (size, lexicographic)
    order wins; for M-matrix reflection the solution is unique so the order
    is only a determinism contract.
    """

    def __init__(self, refl: np.ndarray, tol: float = FEAS_TOL):
        refl = np.asarray(refl, dtype=float)
        self.d = refl.shape[0]
        self.refl = refl
        self.tol = tol
        self._candidates = []
        for subset in _ordered_subsets(self.d):
            if not subset:
                self._candidates.append((subset, None, None))
                continue
            j = list(subset)
            try:
                inv_jj = np.linalg.inv(refl[np.ix_(j, j)])
            except np.linalg.LinAlgError:
                continue  # singular principal block: skip this active set
            # z = w + R[:, J] dy with dy = -inv(R_JJ) w_J
            dy_map = -inv_jj  # (|J|, |J|) applied to w[J]
            z_map = np.eye(self.d)
            z_map[:, j] += refl[:, j] @ dy_map
            self._candidates.append((subset, z_map, dy_map))

    def reflect_many(self, w: np.ndarray, want_dy: bool = False):
        """Reflect a batch of points (n, d); returns z and optionally dy."""
        w = np.asarray(w, dtype=float)
        tol = self.tol
        # Fast path: points already in the orthant keep their position.
        interior = (w >= -tol).all(axis=1)
        if interior.all():
            z = np.maximum(w, 0.0)
            if want_dy:
                return z, np.zeros_like(w)
            return z
        z = np.empty_like(w)
        dy = np.zeros_like(w) if want_dy else None
        rows_in = np.nonzero(interior)[0]
        z[rows_in] = np.maximum(w[rows_in], 0.0)
        pending = np.nonzero(~interior)[0]
        wp = w[pending]
        for subset, z_map, dy_map in self._candidates[1:]:
            if pending.size == 0:
                break
            j = list(subset)
            dy_j = wp[:, j] @ dy_map.T
            z_cand = wp @ z_map.T
            z_cand[:, j] = 0.0
            feas = (dy_j >= -tol).all(axis=1) & (z_cand >= -tol).all(axis=1)
            if feas.any():
                rows = pending[feas]
                z[rows] = np.maximum(z_cand[feas], 0.0)
                if want_dy:
                    dy[np.ix_(rows, j)] = np.maximum(dy_j[feas], 0.0)
                pending = pending[~feas]
                wp = w[pending]
        if pending.size:
            raise NoSolution(
                f"no feasible complementary active set for points {w[pending[:3]]}"
            )
        return (z, dy) if want_dy else z


_REFLECTOR_CACHE: dict[tuple, OrthantReflector] = {}


def get_reflector(refl: np.ndarray) -> OrthantReflector:
    refl = np.asarray(refl, dtype=float)
    key = (refl.shape[0], refl.tobytes())
    ref = _REFLECTOR_CACHE.get(key)
    if ref is None:
        ref = OrthantReflector(refl)
        if len(_REFLECTOR_CACHE) > 64:
            _REFLECTOR_CACHE.clear()
        _REFLECTOR_CACHE[key] = ref
    return ref


def _lemke(w: np.ndarray, refl: np.ndarray, max_pivots: int = 500) -> ReflectResult:
    """Complementary pivoting for z = w + R dy with an artificial column.

    Used above the enumeration size guard.  Ray termination raises
    NoSolution; for M-matrix data the method always terminates at a
    complementary basis.
    """
    d = refl.shape[0]
    if (w >= 0).all():
        return ReflectResult(z=w.copy(), dy=np.zeros(d))
    # Tableau for z - R dy - e t = w over basis variables.
    tableau = np.hstack([np.eye(d), -refl, -np.ones((d, 1)), w.reshape(-1, 1)])
    basis = list(range(d))  # z_i basic initially
    # Bring in the artificial variable at the most negative row.
    row = int(np.argmin(tableau[:, -1]))
    col = 2 * d
    tableau[row] /= tableau[row, col]
    for r in range(d):
        if r != row:
            tableau[r] -= tableau[r, col] * tableau[row]
    leaving = basis[row]
    basis[row] = col
    entering = leaving + d if leaving < d else leaving - d
    for _ in range(max_pivots):
        ratios = np.full(d, np.inf)
        colvals = tableau[:, entering]
        mask = colvals > 1e-12
        ratios[mask] = tableau[mask, -1] / colvals[mask]
        if not np.isfinite(ratios).any():
            raise NoSolution("complementary pivoting terminated on a ray")
        row = int(np.argmin(ratios))
        tableau[row] /= tableau[row, entering]
        for r in range(d):
            if r != row:
                tableau[r] -= tableau[r, entering] * tableau[row]
        leaving = basis[row]
        basis[row] = entering
        if leaving == 2 * d:
            z = np.zeros(d)
            dy = np.zeros(d)
            for r, b in enumerate(basis):
                val = tableau[r, -1]
                if b < d:
                    z[b] = val
                elif b < 2 * d:
                    dy[b - d] = val
            return ReflectResult(z=np.clip(z, 0.0, None), dy=np.clip(dy, 0.0, None))
        entering = leaving + d if leaving < d else leaving - d
    raise NoSolution("complementary pivoting failed to terminate")


def reflect_step(w, params: ModelParams) -> ReflectResult:
    """Solve the one-step reflection for a single point.

    Enumerates active sets for d <= 4 and pivots beyond that size.
    """
    w = np.asarray(w, dtype=float)
    if not np.isfinite(w).all():
        raise ValueError(f"point must be finite, got {w}")
    if params.d <= _ENUM_MAX_DIM:
        reflector = get_reflector(params.refl)
        z, dy = reflector.reflect_many(w.reshape(1, -1), want_dy=True)
        return ReflectResult(z=z[0], dy=dy[0])
    return _lemke(w, params.refl)


def reflect_step_oracle(w, params: ModelParams) -> ReflectResult:
    """Brute-force reflection: try every active set, return the first feasible.

    Test oracle only; solves each candidate linear system from scratch.
    """
    w = np.asarray(w, dtype=float)
    d = params.d
    refl = params.refl
    tol = FEAS_TOL
    for subset in _ordered_subsets(d):
        dy = np.zeros(d)
        if subset:
            j = list(subset)
            try:
                dy_j = np.linalg.solve(refl[np.ix_(j, j)], -w[j])
            except np.linalg.LinAlgError:
                continue
            dy[j] = dy_j
        z = w + refl @ dy
        if subset:
            z[list(subset)] = 0.0
        if (z >= -tol).all() and (dy >= -tol).all():
            return ReflectResult(z=np.clip(z, 0.0, None), dy=np.clip(dy, 0.0, None))
    raise NoSolution(f"no feasible complementary active set for point {w}")


def regulate_path(driver, params: ModelParams):
    """Regulate a piecewise-constant driving path into the orthant.

    Parameters
    ----------
    driver : array-like, shape (T+1, d) or (T+1,) for d=1
        Driving path values at consecutive steps; the first value must lie
        in the orthant.

    Returns
    -------
    (phi, eta) : ndarrays of the same shape
        Regulated path and the cumulative (componentwise nondecreasing)
        pushing process, with ``phi[k] = phi[k-1] + (driver[k] -
        driver[k-1]) + R (eta[k] - eta[k-1])`` at every step.
    """
    driver = np.asarray(driver, dtype=float)
    squeeze = driver.ndim == 1
    if squeeze:
        driver = driver.reshape(-1, 1)
    if driver.shape[1] != params.d:
        raise ValueError(f"driver has dimension {driver.shape[1]}, expected {params.d}")
    if (driver[0] < 0).any():
        raise ValueError(f"driver must start in the orthant, got {driver[0]}")
    steps = driver.shape[0]
    phi = np.empty_like(driver)
    eta = np.zeros_like(driver)
    phi[0] = driver[0]
    for k in range(1, steps):
        res = reflect_step(phi[k - 1] + driver[k] - driver[k - 1], params)
        phi[k] = res.z
        eta[k] = eta[k - 1] + res.dy
    if squeeze:
        return phi[:, 0], eta[:, 0]
    return phi, eta
