"""Problem data: drift, covariance, reflection matrix, and experiment scenario.

Validation covers the structural conditions the rest of the package relies on:
the covariance must be symmetric positive definite, the reflection matrix must
be completely-S (existence of the reflected process), and, when requested, a
nonsingular M-matrix with strictly negative drift (the positive-recurrence
regime used by the general-dimension importance function).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


class ModelError(ValueError):
    """Invalid model or scenario data."""


class NotSPD(ModelError):
    """Covariance matrix is not symmetric positive definite."""


class NotCompletelyS(ModelError):
    """Reflection matrix fails the completely-S test."""


class NotMMatrix(ModelError):
    """Reflection matrix is not a nonsingular M-matrix."""


class DriftNotNegative(ModelError):
    """Drift has a nonnegative component where strict negativity is required."""


class DimensionMismatch(ModelError):
    """Inputs have inconsistent or unsupported dimensions."""


_MINOR_TOL = 1e-12
_MAX_DIM = 8  # completely-S test enumerates principal submatrices


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Validated problem data for the reflected diffusion.

    Attributes
    ----------
    d : int
        State dimension.
    theta : ndarray, shape (d,)
        Drift vector (state units per unit time).
    sigma : ndarray, shape (d, d)
        Covariance matrix of the driving Brownian motion.
    sigma_inv : ndarray, shape (d, d)
        Inverse covariance; weights the inner products used by the
        variational problem.
    sigma_chol : ndarray, shape (d, d)
        Lower-triangular factor with ``L @ L.T == sigma``.
    refl : ndarray, shape (d, d)
        Reflection matrix; column i is the pushing direction on face i.
    m_matrix : bool
        Whether ``refl`` is a nonsingular M-matrix (nonpositive off-diagonal
        entries, all leading principal minors positive).
    """

    d: int
    theta: np.ndarray
    sigma: np.ndarray
    sigma_inv: np.ndarray
    sigma_chol: np.ndarray
    refl: np.ndarray
    m_matrix: bool

    @property
    def drift_negative(self) -> bool:
        return bool((self.theta < 0).all())

    @property
    def recurrence_certified(self) -> bool:
        """True when the M-matrix condition with negative drift holds.

        This is the only positive-recurrence certificate the package checks
        for d >= 3; other recurrent models are accepted but uncertified.
        """
        return self.m_matrix and self.drift_negative


@dataclass(frozen=True, eq=False)
class Scenario:
    """Scaled experiment geometry: start point and the two stopping sets.

    The inner set is ``{z >= 0: sum(z) <= epsilon / n}`` and the outer set is
    ``{z >= 0: sum(z) >= 1}``.
    """

    n: int
    epsilon: float
    start: np.ndarray

    @property
    def a_level(self) -> float:
        return self.epsilon / self.n

    @property
    def b_level(self) -> float:
        return 1.0

    def __post_init__(self):
        if self.n < 1 or int(self.n) != self.n:
            raise ModelError(f"scale n must be a positive integer, got {self.n}")
        if not (0.0 < self.epsilon < 1.0):
            raise ModelError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        start = np.asarray(self.start, dtype=float)
        if start.ndim != 1:
            raise DimensionMismatch("start point must be a vector")
        if (start < 0).any():
            raise ModelError(f"start point must be in the nonnegative orthant: {start}")
        total = float(start.sum())
        if not (self.epsilon / self.n < total < 1.0):
            raise ModelError(
                "start must lie strictly between the stopping sets: "
                f"need {self.epsilon / self.n} < sum(start)={total} < 1"
            )
        start.setflags(write=False)
        object.__setattr__(self, "start", start)


def _feasible_vertex_exists(g: np.ndarray) -> bool:
    """Whether some v >= 0 satisfies g @ v > 0, by vertex enumeration.

    Works on the polyhedron ``{v >= 0, g v >= 1}``: nonempty iff it has a
    vertex, and every vertex solves a square system taken from the 2k
    constraints at equality.  Exact (up to solve tolerance) for the tiny
    sizes allowed here.
    """
    k = g.shape[0]
    ones = np.ones(k)
    # Cheap certificates first: v = 1 and v = G^{-1} 1 settle most cases.
    if (g @ ones > 0).all():
        return True
    try:
        v = np.linalg.solve(g, ones)
        if (v >= 0).all():
            return True
    except np.linalg.LinAlgError:
        pass
    # Constraint rows: [g; I], right-hand sides [1; 0].
    rows = np.vstack([g, np.eye(k)])
    rhs = np.concatenate([ones, np.zeros(k)])
    tol = 1e-9
    for active in combinations(range(2 * k), k):
        sub = rows[list(active)]
        try:
            v = np.linalg.solve(sub, rhs[list(active)])
        except np.linalg.LinAlgError:
            continue
        if (v >= -tol).all() and (g @ v >= 1 - tol).all():
            return True
    return False


def is_completely_s(refl: np.ndarray) -> bool:
    """Brute-force completely-S test over all principal submatrices."""
    refl = np.asarray(refl, dtype=float)
    d = refl.shape[0]
    if d > _MAX_DIM:
        raise DimensionMismatch(f"completely-S test supports d <= {_MAX_DIM}, got {d}")
    for k in range(1, d + 1):
        for subset in combinations(range(d), k):
            idx = list(subset)
            if not _feasible_vertex_exists(refl[np.ix_(idx, idx)]):
                return False
    return True


def is_m_matrix(refl: np.ndarray) -> bool:
    """Nonsingular M-matrix test: Z-pattern plus positive leading minors."""
    refl = np.asarray(refl, dtype=float)
    d = refl.shape[0]
    off = refl - np.diag(np.diag(refl))
    if (off > _MINOR_TOL).any():
        return False
    for k in range(1, d + 1):
        if np.linalg.det(refl[:k, :k]) <= _MINOR_TOL:
            return False
    return True


def validate(theta, sigma, refl, m_matrix_required: bool = False) -> ModelParams:
    """Validate raw problem data and precompute derived matrices.

    Raises
    ------
    DimensionMismatch
        Shapes disagree or d exceeds the supported size.
    NotSPD
        ``sigma`` is not symmetric positive definite.
    NotCompletelyS
        ``refl`` fails the completely-S test.
    NotMMatrix, DriftNotNegative
        Only when ``m_matrix_required`` is set.
    """
    theta = np.asarray(theta, dtype=float).copy()
    sigma = np.asarray(sigma, dtype=float).copy()
    refl = np.asarray(refl, dtype=float).copy()
    if theta.ndim != 1:
        raise DimensionMismatch("theta must be a vector")
    d = theta.shape[0]
    if d < 1:
        raise DimensionMismatch("dimension must be at least 1")
    if d > _MAX_DIM:
        raise DimensionMismatch(f"dimensions above {_MAX_DIM} are not supported")
    if sigma.shape != (d, d) or refl.shape != (d, d):
        raise DimensionMismatch(
            f"sigma and refl must be {d}x{d} matrices, got {sigma.shape} and {refl.shape}"
        )

    scale = max(1.0, float(np.abs(sigma).max()))
    if np.abs(sigma - sigma.T).max() > 1e-10 * scale:
        raise NotSPD("covariance matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotSPD("covariance matrix is not positive definite") from exc
    sigma_inv = np.linalg.inv(sigma)
    if np.abs(sigma_inv @ sigma - np.eye(d)).max() > 1e-10:
        raise NotSPD("covariance matrix is too ill-conditioned to invert reliably")

    if not is_completely_s(refl):
        raise NotCompletelyS(
            "some principal submatrix of the reflection matrix admits no "
            "v >= 0 with G v > 0"
        )
    m_flag = is_m_matrix(refl)
    if m_matrix_required:
        if not m_flag:
            raise NotMMatrix(
                "reflection matrix is not a nonsingular M-matrix "
                "(need nonpositive off-diagonals and positive leading minors)"
            )
        if (theta >= 0).any():
            raise DriftNotNegative(f"every drift component must be negative, got {theta}")

    for arr in (theta, sigma, sigma_inv, chol, refl):
        arr.setflags(write=False)
    return ModelParams(
        d=d,
        theta=theta,
        sigma=sigma,
        sigma_inv=sigma_inv,
        sigma_chol=chol,
        refl=refl,
        m_matrix=m_flag,
    )


def normalized_reflection_2d(refl: np.ndarray) -> np.ndarray:
    """Rescale columns of a 2x2 reflection matrix to unit diagonal.

    Column rescaling by a positive factor leaves the reflected process
    unchanged up to a rescaling of the pushing process, so tests phrased for
    unit-diagonal matrices apply after this normalization.
    """
    refl = np.asarray(refl, dtype=float)
    diag = np.diag(refl)
    if (diag <= 0).any():
        raise ModelError(f"reflection diagonal entries must be positive, got {diag}")
    return refl / diag[np.newaxis, :]


def check_2d_recurrence(params: ModelParams) -> bool:
    """Two-dimensional positive-recurrence test on the normalized matrix.

    With unit diagonal and off-diagonal entries r1 (row 2, col 1) and
    r2 (row 1, col 2), recurrence holds iff

        theta_1 + r2 * max(-theta_2, 0) < 0  and
        theta_2 + r1 * max(-theta_1, 0) < 0.
    """
    if params.d != 2:
        raise DimensionMismatch(f"recurrence test is specific to d=2, got d={params.d}")
    refl = normalized_reflection_2d(params.refl)
    r2 = refl[0, 1]
    r1 = refl[1, 0]
    t1, t2 = params.theta
    t1_minus = max(-t1, 0.0)
    t2_minus = max(-t2, 0.0)
    return bool(t1 + r2 * t2_minus < 0 and t2 + r1 * t1_minus < 0)
