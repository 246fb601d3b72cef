"""Large-deviations variational problem: explicit 2-D solution and local face costs.

Two layers live here.  In two dimensions the minimal action from the origin
to any point has a closed form organized around "cones of boundary
influence": endpoints inside a cone are reached optimally via the matching
boundary face, everything else by a straight interior path.  In general
dimension the package only needs locally optimal costs between points pinned
to a common face; those are solved by searching the active subset J* of the
face indices that satisfies the multiplier conditions of the constrained
problem.

All inner products below are weighted by D = inv(sigma):
``<u, v>_D = u . (D v)`` and ``|u|_D = sqrt(<u, u>_D)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .model import (
    DimensionMismatch,
    ModelError,
    ModelParams,
    check_2d_recurrence,
    normalized_reflection_2d,
)

_COND_TOL = 1e-10  # multiplier / alignment inequality slack
_CONE_TOL = 1e-12  # cone membership slack on barycentric coefficients


class RecurrenceViolated(ModelError):
    """The 2-D positive-recurrence condition fails for this model."""


class ConditionViolated(ModelError):
    """Point pair is incompatible with the requested face index set."""


class NoJStar(RuntimeError):
    """No active subset passed the optimality conditions (numerical degeneracy)."""


@dataclass(frozen=True, eq=False)
class Vp2dSolution:
    """Explicit two-dimensional solution data.

    For each face i in {0, 1} (face i is ``{z: z_i = 0}``):

    * ``p[i]``: vector orthogonal to column i of the reflection matrix,
      normalized so that ``|sigma @ p|_D = 1``;
    * ``a[i] = theta - 2 (theta . p) sigma p``: the exit velocity of the
      optimal path leaving the face;
    * ``reflective[i]``: the face matters iff ``a[i][i] < 0``;
    * ``atilde[i]``: the tilted velocity spanning, together with the edge
      direction ``e[i]`` of the face, the cone of endpoints whose optimal
      path uses face i (rows are NaN for non-reflective faces).
    """

    theta: np.ndarray
    sigma: np.ndarray
    d_mat: np.ndarray
    refl: np.ndarray
    p: np.ndarray
    a: np.ndarray
    reflective: np.ndarray
    atilde: np.ndarray
    e: np.ndarray
    cone_inv: tuple  # per face: 2x2 inverse of [e atilde], or None
    theta_norm: float  # |theta|_D, cached for the hot cost evaluation
    d_theta: np.ndarray  # D @ theta
    cone_grad: tuple  # per face: D @ (atilde - theta), or None


def _d_norm(d_mat: np.ndarray, v: np.ndarray) -> float:
    return float(np.sqrt(max(v @ (d_mat @ v), 0.0)))


def solve_vp_2d(params: ModelParams) -> Vp2dSolution:
    """Build the explicit 2-D solution (cones and exit velocities)."""
    if params.d != 2:
        raise DimensionMismatch(f"explicit solution requires d=2, got d={params.d}")
    refl = normalized_reflection_2d(params.refl)
    if not check_2d_recurrence(params):
        raise RecurrenceViolated(
            "drift/reflection pair fails the 2-D positive-recurrence inequalities"
        )
    theta = params.theta
    sigma = params.sigma
    d_mat = params.sigma_inv

    # Edge directions of the faces: face i = {z_i = 0} is spanned by the
    # other coordinate axis.
    e = np.zeros((2, 2))
    e[0] = (0.0, 1.0)
    e[1] = (1.0, 0.0)

    p = np.zeros((2, 2))
    a = np.zeros((2, 2))
    atilde = np.full((2, 2), np.nan)
    reflective = np.zeros(2, dtype=bool)
    cone_inv = [None, None]
    for i in range(2):
        col = refl[:, i]
        perp = np.array([-col[1], col[0]])
        # |sigma p|_D^2 = p . sigma p for symmetric sigma
        norm = float(np.sqrt(perp @ (sigma @ perp)))
        perp = perp / norm
        if perp[np.argmax(np.abs(perp))] < 0:
            perp = -perp  # sign is immaterial; fix it for determinism
        p[i] = perp
        a[i] = theta - 2.0 * float(theta @ perp) * (sigma @ perp)
        reflective[i] = a[i][i] < 0
        if not reflective[i]:
            continue
        normal = np.zeros(2)
        normal[i] = 1.0
        normal /= float(np.sqrt(normal @ (sigma @ normal)))
        sn = sigma @ normal
        atilde[i] = (
            float(a[i] @ (d_mat @ e[i])) * e[i] - float(a[i] @ (d_mat @ sn)) * sn
        )
        gen = np.column_stack([e[i], atilde[i]])
        det = np.linalg.det(gen)
        if abs(det) > 1e-14:
            cone_inv[i] = np.linalg.inv(gen)
    cone_grad = [
        d_mat @ (atilde[i] - theta) if reflective[i] else None for i in range(2)
    ]
    return Vp2dSolution(
        theta=theta,
        sigma=sigma,
        d_mat=d_mat,
        refl=refl,
        p=p,
        a=a,
        reflective=reflective,
        atilde=atilde,
        e=e,
        cone_inv=tuple(cone_inv),
        theta_norm=_d_norm(d_mat, theta),
        d_theta=d_mat @ theta,
        cone_grad=tuple(cone_grad),
    )


def _cone_membership_many(sol: Vp2dSolution, zs: np.ndarray, i: int) -> np.ndarray:
    """Boolean membership of each row of zs in cone i."""
    n = zs.shape[0]
    if not sol.reflective[i]:
        return np.zeros(n, dtype=bool)
    inv = sol.cone_inv[i]
    if inv is None:
        # Degenerate cone: the tilted velocity is parallel to the edge, the
        # cone collapses to the face ray itself.
        scale = np.abs(zs).sum(axis=1) + 1.0
        on_face = np.abs(zs[:, i]) <= 1e-12 * scale
        return on_face & (zs[:, 1 - i] >= -1e-12)
    coeff = zs @ inv.T
    return (coeff >= -_CONE_TOL).all(axis=1)


def vp2d_cost_many(sol: Vp2dSolution, zs: np.ndarray) -> np.ndarray:
    """Vectorized minimal action from the origin to each row of zs (zs >= 0)."""
    zs = np.asarray(zs, dtype=float)
    zd = zs @ sol.d_mat
    z_norms = np.sqrt(np.maximum((zd * zs).sum(axis=1), 0.0))
    value = sol.theta_norm * z_norms - zs @ sol.d_theta
    in1 = _cone_membership_many(sol, zs, 0)
    in2 = _cone_membership_many(sol, zs, 1)
    if in1.any():
        value = np.where(in1, zs @ sol.cone_grad[0], value)
    if in2.any():
        value = np.where(in2, zs @ sol.cone_grad[1], value)
    both = in1 & in2
    if both.any():
        value = np.where(
            both, np.minimum(zs @ sol.cone_grad[0], zs @ sol.cone_grad[1]), value
        )
    return np.maximum(value, 0.0)


def vp2d_cost(sol: Vp2dSolution, z) -> float:
    """Minimal action from the origin to a single point z >= 0."""
    z = np.asarray(z, dtype=float)
    return float(vp2d_cost_many(sol, z.reshape(1, -1))[0])


def _golden_min(f, lo: float, hi: float, tol: float = 1e-12):
    """Golden-section minimum of a unimodal function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    xs = [a, (a + b) / 2, b]
    vals = [f(x) for x in xs]
    k = int(np.argmin(vals))
    return xs[k], vals[k]


def infimum_over_B_2d(sol: Vp2dSolution):
    """Minimize the 2-D action over the segment {z >= 0, z_0 + z_1 = 1}.

    The segment decomposes into pieces on which the cost is either linear
    (inside a cone) or smooth and convex (interior formula), so a
    golden-section pass per piece plus the breakpoints is exact to
    tolerance.

    Returns
    -------
    (value, argmin) : (float, ndarray)
    """
    breaks = {0.0, 1.0}
    for i in range(2):
        if not sol.reflective[i]:
            continue
        rays = [sol.e[i]]
        if np.isfinite(sol.atilde[i]).all():
            rays.append(sol.atilde[i])
        for u in rays:
            tot = u.sum()
            if tot <= 1e-14:
                continue
            pt = u / tot
            if -1e-12 <= pt[0] <= 1 + 1e-12:
                breaks.add(float(min(max(pt[0], 0.0), 1.0)))
    knots = sorted(breaks)

    def cost_at(t: float) -> float:
        return vp2d_cost(sol, np.array([t, 1.0 - t]))

    best_val = np.inf
    best_t = 0.0
    for t in knots:
        v = cost_at(t)
        if v < best_val:
            best_val, best_t = v, t
    for lo, hi in zip(knots[:-1], knots[1:]):
        if hi - lo < 1e-12:
            continue
        t, v = _golden_min(cost_at, lo, hi)
        if v < best_val:
            best_val, best_t = v, t
    return best_val, np.array([best_t, 1.0 - best_t])


@dataclass(frozen=True, eq=False)
class LocalCost:
    """Solved locally optimal cost between two points on a common face.

    ``j_star`` is the active subset of the face index set K; ``b_mat`` and
    ``a_mat`` are the associated projection matrices; ``alpha`` the rate of
    the optimal straight-line path (traversed over ``duration = 1/alpha``);
    ``lam`` the multipliers (empty for an interior solution); ``b_k`` the
    optimal velocity.
    """

    k: tuple
    j_star: tuple
    b_mat: np.ndarray | None
    a_mat: np.ndarray
    alpha: float
    lam: np.ndarray
    cost: float
    b_k: np.ndarray

    @property
    def duration(self) -> float:
        return 1.0 / self.alpha


def _validate_face_pair(k_set: tuple, w: np.ndarray, v: np.ndarray):
    if (w < 0).any() or (v < 0).any():
        raise ConditionViolated("points must lie in the nonnegative orthant")
    if np.array_equal(w, v):
        raise ConditionViolated("points must differ")
    for i in k_set:
        if abs(w[i]) > 1e-12 or abs(v[i]) > 1e-12:
            raise ConditionViolated(
                f"coordinate {i} must vanish at both points for face set {k_set}"
            )


def _local_cost_candidates(params: ModelParams, k_set: tuple, w: np.ndarray, v: np.ndarray):
    """Yield (j, pieces, passed) for each candidate subset in search order."""
    d_mat = params.sigma_inv
    refl = params.refl
    theta = params.theta
    dv = v - w
    scale = float(np.linalg.norm(dv))
    for size in range(len(k_set) + 1):
        for j in combinations(k_set, size):
            if not j:
                a_mat = np.eye(params.d)
                b_mat = None
                a_theta = theta
                a_dv = dv
            else:
                cols = list(j)
                r_lj = refl[:, cols]
                gram = r_lj.T @ d_mat @ r_lj
                try:
                    b_mat = np.linalg.solve(gram, r_lj.T @ d_mat)
                except np.linalg.LinAlgError:
                    continue
                a_mat = np.eye(params.d) - r_lj @ b_mat
                a_theta = a_mat @ theta
                a_dv = a_mat @ dv
            norm_dv = _d_norm(d_mat, a_dv)
            if norm_dv <= 1e-14 * max(scale, 1.0):
                continue  # direction annihilated: no valid straight path
            norm_theta = _d_norm(d_mat, a_theta)
            alpha = norm_theta / norm_dv
            lam = np.empty(0)
            passed = True
            if j:
                lam = alpha * (b_mat @ dv) - b_mat @ theta
                if (lam <= -_COND_TOL).any():
                    passed = False
            if passed:
                probe = alpha * dv - theta
                for idx in k_set:
                    if idx in j:
                        continue
                    val = float((a_mat @ refl[:, idx]) @ (d_mat @ probe))
                    if val > _COND_TOL:
                        passed = False
                        break
            yield j, (a_mat, b_mat, a_theta, a_dv, alpha, lam, norm_theta, norm_dv), passed


def local_cost(
    params: ModelParams,
    K,
    w,
    v,
    verify_unique: bool = False,
) -> LocalCost:
    """Locally optimal cost from w to v with the path pinned to face set K.

    Face indices are 0-based.  Both points must vanish on every coordinate
    in K.  The unique active subset J* of K satisfying the multiplier and
    alignment conditions determines the cost

        |A theta|_D |A (v-w)|_D - <A theta, A (v-w)>_D,  A = A^{J*}.

    With ``verify_unique`` the full subset lattice is enumerated and a
    duplicate pass raises, which property tests use to confirm uniqueness.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    k_set = tuple(sorted(int(i) for i in K))
    if any(i < 0 or i >= params.d for i in k_set):
        raise ConditionViolated(f"face indices out of range: {k_set}")
    _validate_face_pair(k_set, w, v)

    winner = None
    for j, pieces, passed in _local_cost_candidates(params, k_set, w, v):
        if not passed:
            continue
        if winner is None:
            winner = (j, pieces)
            if not verify_unique:
                break
        else:
            raise NoJStar(
                f"multiple active subsets pass the optimality conditions: "
                f"{winner[0]} and {j}"
            )
    if winner is None:
        raise NoJStar(f"no active subset passed the optimality conditions for K={k_set}")

    j, (a_mat, b_mat, a_theta, a_dv, alpha, lam, norm_theta, norm_dv) = winner
    cost = norm_theta * norm_dv - float(a_theta @ (params.sigma_inv @ a_dv))
    if cost < 0:
        if cost < -1e-9:
            raise NoJStar(f"negative cost {cost} signals numerical degeneracy")
        cost = 0.0
    dv = v - w
    if j:
        b_k = alpha * a_dv + params.refl[:, list(j)] @ (b_mat @ params.theta)
    else:
        b_k = alpha * dv
    return LocalCost(
        k=k_set,
        j_star=j,
        b_mat=None if b_mat is None else b_mat,
        a_mat=a_mat,
        alpha=alpha,
        lam=lam,
        cost=cost,
        b_k=b_k,
    )


def local_cost_direction(params: ModelParams, K, u, verify_unique: bool = False) -> float:
    """Locally optimal cost per unit displacement in direction u on face set K.

    The cost between face points depends only on the displacement v - w, so
    a representative pair is built by splitting u into positive and negative
    parts and bumping the coordinates off K where u vanishes (keeping the
    pair admissible for the face set).
    """
    u = np.asarray(u, dtype=float)
    k_set = tuple(sorted(int(i) for i in K))
    if not np.any(u):
        raise ConditionViolated("direction must be nonzero")
    for i in k_set:
        if abs(u[i]) > 1e-12:
            raise ConditionViolated(f"direction must vanish on face coordinate {i}")
    bump = np.zeros(params.d)
    for jdx in range(params.d):
        if jdx not in k_set and u[jdx] == 0.0:
            bump[jdx] = 1.0
    w = np.clip(-u, 0.0, None) + bump
    v = np.clip(u, 0.0, None) + bump
    return local_cost(params, k_set, w, v, verify_unique=verify_unique).cost
