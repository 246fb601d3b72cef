"""Compiled per-lane stepping loops used by the ensemble drivers.

Each kernel advances every lane listed in ``local`` until the lane hits a
stopping event (recorded in the output arrays) or exhausts its buffered
noise; refills and all branching bookkeeping stay in Python.  The
arithmetic mirrors the vectorized reference expressions operation for
operation: candidate active sets are tried in ascending (size,
lexicographic) order with the same tolerances, and the importance-function
evaluation follows the same multiply-add order as the array code.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Fire codes shared with the drivers.
CODE_NONE = -1  # buffer exhausted; lane continues next round
CODE_ADVANCE = 0  # splitting: entered the target level set
CODE_DEATH = 1  # entered the inner absorbing set
CODE_BHIT = 2  # entered the outer target set
CODE_TIMEOUT = 3
CODE_KILL = 4  # restart: fell below the killing threshold
CODE_UP = 5  # restart: moved up one or more regions
CODE_ERROR = 6  # reflection failed (numerical breakdown)

_REFLECT_TOL = 1e-12
_CONE_TOL = 1e-12


def pack_reflector(reflector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a reflector's candidate maps for kernel consumption.

    The empty active set is handled inline by the kernels, so candidates
    start at the first nonempty subset; singular subsets are skipped, which
    preserves the (size, lexicographic) search order.
    """
    d = reflector.d
    mask_rows = []
    z_rows = []
    dy_rows = []
    for subset, z_map, dy_map in reflector._candidates:
        if not subset:
            continue
        j = list(subset)
        mask = np.zeros(d, dtype=np.uint8)
        mask[j] = 1
        dy_full = np.zeros((d, d))
        for row_pos, i in enumerate(j):
            for col_pos, jj in enumerate(j):
                dy_full[i, jj] = dy_map[row_pos, col_pos]
        mask_rows.append(mask)
        z_rows.append(z_map)
        dy_rows.append(dy_full)
    return (
        np.array(mask_rows, dtype=np.uint8),
        np.array(z_rows, dtype=np.float64),
        np.array(dy_rows, dtype=np.float64),
    )


def pack_subsolution(sub) -> tuple:
    """Flatten subsolution data for the kernels (kind 0 = scaled L1, 1 = 2-D)."""
    if sub.kind == "scaled_l1":
        dummy2 = np.zeros(2)
        dummy22 = np.zeros((2, 2))
        return (
            0,
            float(sub.r),
            1.0,
            0.0,
            dummy2,
            dummy22,
            np.zeros(2, dtype=np.uint8),
            np.zeros(2, dtype=np.uint8),
            np.zeros((2, 2, 2)),
            np.zeros((2, 2)),
        )
    sol = sub.vp2d
    cone_active = np.array([1 if sol.reflective[i] else 0 for i in range(2)], dtype=np.uint8)
    cone_has_inv = np.array(
        [1 if sol.cone_inv[i] is not None else 0 for i in range(2)], dtype=np.uint8
    )
    cone_inv = np.zeros((2, 2, 2))
    cone_grad = np.zeros((2, 2))
    for i in range(2):
        if sol.cone_inv[i] is not None:
            cone_inv[i] = sol.cone_inv[i]
        if sol.cone_grad[i] is not None:
            cone_grad[i] = sol.cone_grad[i]
    return (
        1,
        1.0,
        float(sub.inf_b),
        float(sol.theta_norm),
        np.asarray(sol.d_theta, dtype=np.float64),
        np.asarray(sol.d_mat, dtype=np.float64),
        cone_active,
        cone_has_inv,
        cone_inv,
        cone_grad,
    )


@njit(inline="always")
def _reflect(w, z, cand_mask, cand_z, cand_dy):
    d = w.shape[0]
    interior = True
    for i in range(d):
        if w[i] < -_REFLECT_TOL:
            interior = False
            break
    if interior:
        for i in range(d):
            z[i] = w[i] if w[i] > 0.0 else 0.0
        return True
    for c in range(cand_mask.shape[0]):
        feas = True
        for i in range(d):
            if cand_mask[c, i] == 1:
                acc = 0.0
                for jj in range(d):
                    acc += cand_dy[c, i, jj] * w[jj]
                if acc < -_REFLECT_TOL:
                    feas = False
                    break
        if not feas:
            continue
        for i in range(d):
            if cand_mask[c, i] == 1:
                z[i] = 0.0
            else:
                acc = 0.0
                for jj in range(d):
                    acc += cand_z[c, i, jj] * w[jj]
                if acc < -_REFLECT_TOL:
                    feas = False
                    break
                z[i] = acc if acc > 0.0 else 0.0
        if feas:
            return True
    return False


@njit(inline="always")
def _ubar(
    z, kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
    cone_active, cone_has_inv, cone_inv, cone_grad,
):
    if kind == 0:
        s = 0.0
        for i in range(z.shape[0]):
            s += abs(z[i])
        return (1.0 - s) / r_scale
    zd0 = z[0] * d_mat[0, 0] + z[1] * d_mat[1, 0]
    zd1 = z[0] * d_mat[0, 1] + z[1] * d_mat[1, 1]
    q = zd0 * z[0] + zd1 * z[1]
    if q < 0.0:
        q = 0.0
    cost = theta_norm * np.sqrt(q) - (z[0] * d_theta[0] + z[1] * d_theta[1])
    in_cone0 = False
    in_cone1 = False
    for i in range(2):
        if cone_active[i] == 0:
            continue
        member = False
        if cone_has_inv[i] == 1:
            c0 = z[0] * cone_inv[i, 0, 0] + z[1] * cone_inv[i, 0, 1]
            c1 = z[0] * cone_inv[i, 1, 0] + z[1] * cone_inv[i, 1, 1]
            member = c0 >= -_CONE_TOL and c1 >= -_CONE_TOL
        else:
            scale = abs(z[0]) + abs(z[1]) + 1.0
            member = abs(z[i]) <= 1e-12 * scale and z[1 - i] >= -1e-12
        if i == 0:
            in_cone0 = member
        else:
            in_cone1 = member
    if in_cone0 and in_cone1:
        g0 = z[0] * cone_grad[0, 0] + z[1] * cone_grad[0, 1]
        g1 = z[0] * cone_grad[1, 0] + z[1] * cone_grad[1, 1]
        cost = g0 if g0 < g1 else g1
    elif in_cone0:
        cost = z[0] * cone_grad[0, 0] + z[1] * cone_grad[0, 1]
    elif in_cone1:
        cost = z[0] * cone_grad[1, 0] + z[1] * cone_grad[1, 1]
    if cost < 0.0:
        cost = 0.0
    return inf_b - cost


@njit(cache=True)
def mc_kernel(
    pos, buf, ptr, steps, local,
    cand_mask, cand_z, cand_dy,
    a_level, b_level, max_steps,
    out_code,
):
    block = buf.shape[1]
    d = pos.shape[1]
    w = np.empty(d)
    z = np.empty(d)
    for ii in range(local.shape[0]):
        lane = local[ii]
        code = CODE_NONE
        nst = steps[lane]
        while ptr[lane] < block:
            for i in range(d):
                w[i] = pos[lane, i] + buf[lane, ptr[lane], i]
            ptr[lane] += 1
            if not _reflect(w, z, cand_mask, cand_z, cand_dy):
                code = CODE_ERROR
                break
            for i in range(d):
                pos[lane, i] = z[i]
            nst += 1
            total = 0.0
            for i in range(d):
                total += z[i]
            if total >= b_level:
                code = CODE_BHIT
                break
            if total <= a_level:
                code = CODE_DEATH
                break
            if nst >= max_steps:
                code = CODE_TIMEOUT
                break
        steps[lane] = nst
        out_code[ii] = code


@njit(cache=True)
def split_kernel(
    pos, buf, ptr, target, psteps, local,
    cand_mask, cand_z, cand_dy,
    kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
    cone_active, cone_has_inv, cone_inv, cone_grad,
    lvl_scale, delta, n_scale, a_level, b_level, max_steps,
    out_code,
):
    block = buf.shape[1]
    d = pos.shape[1]
    w = np.empty(d)
    z = np.empty(d)
    for ii in range(local.shape[0]):
        lane = local[ii]
        code = CODE_NONE
        t = target[lane]
        thr_value = (t - 1) * delta / n_scale
        nst = psteps[lane]
        while ptr[lane] < block:
            for i in range(d):
                w[i] = pos[lane, i] + buf[lane, ptr[lane], i]
            ptr[lane] += 1
            if not _reflect(w, z, cand_mask, cand_z, cand_dy):
                code = CODE_ERROR
                break
            for i in range(d):
                pos[lane, i] = z[i]
            nst += 1
            total = 0.0
            for i in range(d):
                total += z[i]
            if t == 0:
                member = total >= b_level
            else:
                value = lvl_scale * _ubar(
                    z, kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
                    cone_active, cone_has_inv, cone_inv, cone_grad,
                )
                member = value <= thr_value
            if member:
                code = CODE_ADVANCE
                break
            if total <= a_level:
                code = CODE_DEATH
                break
            if nst >= max_steps:
                code = CODE_TIMEOUT
                break
        psteps[lane] = nst
        out_code[ii] = code


@njit(cache=True)
def restart_kernel(
    pos, buf, ptr, region, threshold, psteps, local,
    cand_mask, cand_z, cand_dy,
    kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
    cone_active, cone_has_inv, cone_inv, cone_grad,
    u0, region_scale, a_level, b_level, max_steps,
    out_code, out_j, out_k,
):
    block = buf.shape[1]
    d = pos.shape[1]
    w = np.empty(d)
    z = np.empty(d)
    for ii in range(local.shape[0]):
        lane = local[ii]
        code = CODE_NONE
        oj = 0
        ok = 0
        j = region[lane]
        thr = threshold[lane]
        nst = psteps[lane]
        while ptr[lane] < block:
            for i in range(d):
                w[i] = pos[lane, i] + buf[lane, ptr[lane], i]
            ptr[lane] += 1
            if not _reflect(w, z, cand_mask, cand_z, cand_dy):
                code = CODE_ERROR
                break
            for i in range(d):
                pos[lane, i] = z[i]
            nst += 1
            total = 0.0
            for i in range(d):
                total += z[i]
            u = _ubar(
                z, kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
                cone_active, cone_has_inv, cone_inv, cone_grad,
            )
            kf = np.floor(region_scale * (u0 - u))
            k = np.int64(kf)
            if k < 0:
                k = 0
            if total >= b_level:
                code = CODE_BHIT
                oj = j
                ok = k
                break
            if total <= a_level:
                code = CODE_DEATH
                break
            if nst >= max_steps:
                code = CODE_TIMEOUT
                break
            if k < thr:
                code = CODE_KILL
                break
            if k > j:
                code = CODE_UP
                oj = j
                ok = k
                j = k
                break
            j = k
        region[lane] = j
        psteps[lane] = nst
        out_code[ii] = code
        out_j[ii] = oj
        out_k[ii] = ok
