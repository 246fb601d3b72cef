"""Subsolutions of the variational problem and the level machinery built on them.

A subsolution is a continuous function that is nonpositive on the target set
and whose decrease between any two admissible points is dominated by the
locally optimal cost between them.  Its level sets supply the splitting
thresholds, and its value at the origin controls estimator variance.

Two constructions ship:

* ``exact2d``: in two dimensions, the explicit solution itself (shifted so
  the target-set infimum becomes the zero level) is a tight subsolution.
* ``scaled_l1``: in any dimension, the L1 norm rescaled by the worst ratio
  of norm to locally optimal directional cost over all faces, then shifted.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product

import math

import numpy as np

from .model import ModelError, ModelParams
from .varprob import (
    Vp2dSolution,
    infimum_over_B_2d,
    local_cost,
    local_cost_direction,
    solve_vp_2d,
    vp2d_cost,
    vp2d_cost_many,
)


class EmptySet(ModelError):
    """The requested direction set is empty (face set equals all coordinates)."""


class DegenerateCost(ModelError):
    """A directional cost vanished on the mesh; an assumption is violated."""


@dataclass(frozen=True, eq=False)
class Subsolution:
    """Evaluator data for one subsolution.

    ``inf_b`` is the infimum of the underlying function over the target set
    (1 for the L1 norm; the variational infimum for the exact 2-D kind).
    ``r`` is the L1 scaling factor (``scaled_l1`` only).
    """

    kind: str  # "exact2d" | "scaled_l1"
    inf_b: float
    r: float | None = None
    vp2d: Vp2dSolution | None = None

    @property
    def value_at_origin(self) -> float:
        # Underlying function vanishes at 0 for both kinds, so the origin
        # value is the shift itself (the tightness diagnostic).
        if self.kind == "scaled_l1":
            return 1.0 / self.r
        return self.inf_b


def exact_2d_subsolution(params: ModelParams) -> Subsolution:
    """Tight 2-D subsolution from the explicit solution."""
    sol = solve_vp_2d(params)
    inf_b, _ = infimum_over_B_2d(sol)
    return Subsolution(kind="exact2d", inf_b=inf_b, r=None, vp2d=sol)


def scaled_l1_subsolution(
    params: ModelParams,
    resolution: int = 16,
    refine_iters: int = 60,
    require_recurrence: bool = True,
) -> Subsolution:
    """General-dimension subsolution built from the scaled L1 norm."""
    r = compute_scaling_r(
        params,
        resolution=resolution,
        refine_iters=refine_iters,
        require_recurrence=require_recurrence,
    )
    return Subsolution(kind="scaled_l1", inf_b=1.0, r=r, vp2d=None)


def _compositions(total: int, parts: int):
    """All nonnegative integer tuples of the given length summing to total."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def direction_grid(d: int, K, resolution: int):
    """Deterministic mesh over the admissible L1-unit directions off face set K.

    Directions v satisfy: v vanishes on K, ``sum(|v|) = 1``, and at least one
    coordinate off K is nonnegative.  The mesh enumerates every sign pattern
    on the free coordinates except the all-negative one and subdivides each
    resulting simplex facet.
    """
    k_set = frozenset(int(i) for i in K)
    free = [i for i in range(d) if i not in k_set]
    if not free:
        raise EmptySet("no free coordinates: face set covers every dimension")
    if resolution < 2:
        raise ModelError(f"resolution must be at least 2, got {resolution}")
    m = len(free)
    seen = {}
    for signs in product((1.0, -1.0), repeat=m):
        if all(s < 0 for s in signs):
            continue
        for weights in _compositions(resolution, m):
            key = tuple(int(wi) * int(si) for wi, si in zip(weights, signs))
            if key in seen:
                continue
            v = np.zeros(d)
            for coord, wi, si in zip(free, weights, signs):
                v[coord] = si * wi / resolution
            seen[key] = v
    return list(seen.values())


def _proper_subsets(d: int):
    for size in range(d):
        yield from combinations(range(d), size)


def _refine_on_facet(params, k_set, free, signs, weights, resolution, iters):
    """Shrinking-simplex pattern search for the ratio 1/I within one facet.

    Operates on the nonnegative barycentric weights of the facet (the ratio
    of the L1 norm to the directional cost is scale invariant, so staying on
    the weight simplex loses nothing).
    """
    d = params.d
    m = len(free)

    def build(wts):
        v = np.zeros(d)
        for coord, wi, si in zip(free, wts, signs):
            v[coord] = si * wi
        return v

    def ratio(wts):
        total = sum(wts)
        if total <= 0:
            return -np.inf
        v = build(tuple(w / total for w in wts))
        try:
            cost = local_cost_direction(params, k_set, v)
        except Exception:
            return -np.inf
        if cost <= 1e-12:
            return np.inf
        return 1.0 / cost

    x = [w / resolution for w in weights]
    best = ratio(x)
    step = 1.0 / resolution
    for _ in range(iters):
        improved = False
        if m >= 2:
            for a in range(m):
                for b in range(m):
                    if a == b or x[a] < step:
                        continue
                    cand = list(x)
                    cand[a] -= step
                    cand[b] += step
                    val = ratio(cand)
                    if val > best:
                        best, x = val, cand
                        improved = True
        if not improved:
            step /= 2.0
            if step < 1e-10:
                break
        if not math.isfinite(best):
            break
    return best


def compute_scaling_r(
    params: ModelParams,
    resolution: int = 16,
    refine_iters: int = 60,
    require_recurrence: bool = True,
) -> float:
    """Worst ratio of the L1 norm to the locally optimal directional cost.

    Maximizes ``1 / I_K(v)`` over every proper face set K and every
    admissible unit direction, by meshing each direction set and then
    pattern-searching around the best mesh point.  The directional costs are
    bounded away from zero in the certified recurrent regime, which keeps
    the maximum finite.
    """
    if require_recurrence and not params.recurrence_certified:
        raise ModelError(
            "scaling factor requires the M-matrix/negative-drift regime; "
            "pass require_recurrence=False for diagnostic use only"
        )
    d = params.d
    best = -np.inf
    best_site = None
    for k_tuple in _proper_subsets(d):
        k_set = frozenset(k_tuple)
        free = [i for i in range(d) if i not in k_set]
        m = len(free)
        for signs in product((1.0, -1.0), repeat=m):
            if all(s < 0 for s in signs):
                continue
            for weights in _compositions(resolution, m):
                v = np.zeros(d)
                for coord, wi, si in zip(free, weights, signs):
                    v[coord] = si * wi / resolution
                if not np.any(v):
                    continue
                try:
                    cost = local_cost_direction(params, k_tuple, v)
                except Exception:
                    continue
                if cost <= 1e-12:
                    raise DegenerateCost(
                        f"directional cost vanished at {v} on face set {k_tuple}"
                    )
                ratio = 1.0 / cost
                if ratio > best:
                    best = ratio
                    best_site = (k_tuple, free, signs, weights)
    if best_site is None:
        raise DegenerateCost("no admissible direction found on the mesh")
    k_tuple, free, signs, weights = best_site
    refined = _refine_on_facet(
        params, k_tuple, free, signs, weights, resolution, refine_iters
    )
    return float(max(best, refined))


def tbar(sub: Subsolution, v) -> float:
    """Subsolution value at a single point v >= 0."""
    v = np.asarray(v, dtype=float)
    if sub.kind == "scaled_l1":
        return (1.0 - float(np.abs(v).sum())) / sub.r
    return sub.inf_b - vp2d_cost(sub.vp2d, v)


def tbar_many(sub: Subsolution, vs: np.ndarray) -> np.ndarray:
    """Vectorized subsolution values for rows of vs."""
    vs = np.asarray(vs, dtype=float)
    if sub.kind == "scaled_l1":
        return (1.0 - np.abs(vs).sum(axis=1)) / sub.r
    return sub.inf_b - vp2d_cost_many(sub.vp2d, vs)


@dataclass(frozen=True)
class InequalityReport:
    """Outcome of sampling the face-local subsolution inequality."""

    samples: int
    passes: int
    violations: int
    worst_margin: float  # max of tbar(w) - tbar(v) - cost over the sample


def subsolution_inequality_check(
    sub: Subsolution,
    params: ModelParams,
    samples: int,
    rng: np.random.Generator,
    slack: float = 1e-9,
) -> InequalityReport:
    """Sample face point pairs and test decrease <= locally optimal cost.

    For each draw a proper face set K is chosen, coordinates on K are pinned
    to zero, the rest are uniform on (0, 1], and with probability 1/4 per
    coordinate one of the two points is zeroed there to exercise
    boundary-to-boundary pairs.
    """
    d = params.d
    proper = list(_proper_subsets(d))
    passes = 0
    violations = 0
    worst = -np.inf
    done = 0
    while done < samples:
        k_tuple = proper[rng.integers(len(proper))]
        w = rng.uniform(0.0, 1.0, size=d) + 1e-9
        v = rng.uniform(0.0, 1.0, size=d) + 1e-9
        for i in k_tuple:
            w[i] = 0.0
            v[i] = 0.0
        for jdx in range(d):
            if jdx in k_tuple:
                continue
            if rng.random() < 0.25:
                if rng.random() < 0.5:
                    w[jdx] = 0.0
                else:
                    v[jdx] = 0.0
        if np.array_equal(w, v):
            continue
        cost = local_cost(params, k_tuple, w, v).cost
        margin = tbar(sub, w) - tbar(sub, v) - cost
        worst = max(worst, margin)
        if margin <= slack:
            passes += 1
        else:
            violations += 1
        done += 1
    return InequalityReport(
        samples=samples, passes=passes, violations=violations, worst_margin=worst
    )


def importance_value(sub: Subsolution, delta: float, split_r: int, z) -> float:
    """Importance function: the subsolution scaled by delta / log(split factor)."""
    return delta * tbar(sub, z) / math.log(split_r)


def importance_value_many(
    sub: Subsolution, delta: float, split_r: int, zs: np.ndarray
) -> np.ndarray:
    return delta * tbar_many(sub, zs) / math.log(split_r)


def level_index(sub: Subsolution, delta: float, split_r: int, n: int, z) -> int:
    """Index of the innermost level set containing z.

    Level 0 is the target set itself; level j >= 1 collects the points whose
    importance value does not exceed ``(j - 1) * delta / n``.  The index is
    the smallest such j.
    """
    z = np.asarray(z, dtype=float)
    if float(z.sum()) >= 1.0:
        return 0
    value = importance_value(sub, delta, split_r, z)
    if value <= 0.0:
        return 1
    return 1 + int(math.ceil(n * value / delta))
