"""Ensemble drivers behind the estimators.

A fixed pool of lanes runs replications side by side.  Each lane owns one
replication at a time and draws from that replication's counter-based
stream, keyed by ``(seed, algorithm, n, replication)``; when a replication
completes, the lane immediately takes the next outstanding one.  Noise is
buffered per lane in blocks (block draws equal sequential draws for a numpy
generator, so buffering does not change the stream), and compiled kernels
advance each lane to its next branching event.  All branching bookkeeping
(spawns, killing thresholds, worklists) stays in Python, with particles
within a replication processed one at a time in last-in-first-out order,
exactly like the single-replication reference implementations.

Because every replication's evolution depends only on its own stream, the
results are identical whatever the pool size, chunking, or worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import math

import numpy as np

from . import _kernels
from ._kernels import (
    CODE_ADVANCE,
    CODE_BHIT,
    CODE_DEATH,
    CODE_ERROR,
    CODE_NONE,
    CODE_TIMEOUT,
    CODE_UP,
)
from .skorokhod import NoSolution, get_reflector
from .subsolution import tbar

BLOCK = 256  # noise draws buffered per lane
POOL = 4096  # lanes advanced together
DEFAULT_CHUNK = 50_000

ALGO_TAGS = {"mc": 1, "split": 2, "restart": 3}


def lane_stream(seed: int, algo: str, n: int, rep: int) -> np.random.Generator:
    """The counter-based stream owned by one replication."""
    ss = np.random.SeedSequence([int(seed), ALGO_TAGS[algo], int(n), int(rep)])
    return np.random.Generator(np.random.Philox(ss))


class _LanePool:
    """Lane-indexed noise buffers plus the replication intake counter."""

    def __init__(self, pool, theta, chol, h, n, seed, algo, rep_lo, rep_hi):
        d = theta.shape[0]
        self.pool = pool
        self.seed = seed
        self.algo = algo
        self.n = n
        self.next_rep = rep_lo
        self.rep_hi = rep_hi
        self.gens = [None] * pool
        self.lane_rep = np.full(pool, -1, dtype=np.int64)
        self.drift = theta * h
        self.chol_t = chol.T.copy()
        self.scale = math.sqrt(h / n)
        self.buf = np.empty((pool, BLOCK, d))
        self.ptr = np.full(pool, BLOCK, dtype=np.int64)

    def intake(self, lane: int) -> int:
        """Assign the next outstanding replication to a lane (-1 when done)."""
        if self.next_rep >= self.rep_hi:
            self.lane_rep[lane] = -1
            return -1
        rep = self.next_rep
        self.next_rep += 1
        self.gens[lane] = lane_stream(self.seed, self.algo, self.n, rep)
        self.ptr[lane] = BLOCK
        self.lane_rep[lane] = rep
        return rep

    def refill(self, idx: np.ndarray):
        """Top up exhausted buffers among the given lanes."""
        need = idx[self.ptr[idx] >= BLOCK]
        for i in need:
            g = self.gens[i].standard_normal((BLOCK, self.buf.shape[2]))
            self.buf[i] = (g @ self.chol_t) * self.scale + self.drift
            self.ptr[i] = 0


def _chunk_pool(count: int) -> int:
    return min(POOL, count)


def _reflect_pack(params):
    # Kernels search every active set (the ordering and tolerances match the
    # one-step solver); this stays exact for any completely-S matrix at the
    # dimensions the package admits.
    return _kernels.pack_reflector(get_reflector(params.refl))


# ---------------------------------------------------------------------------
# standard Monte Carlo


def mc_chunk(scenario, params, sim_config, seed, rep_lo, rep_hi):
    """Outcome codes (0=A, 1=B, 2=timeout) and step counts for a rep range."""
    count = rep_hi - rep_lo
    start = np.asarray(scenario.start, dtype=float)
    pool = _chunk_pool(count)
    lanes = _LanePool(
        pool, params.theta, params.sigma_chol, sim_config.h, scenario.n,
        seed, "mc", rep_lo, rep_hi,
    )
    cand_mask, cand_z, cand_dy = _reflect_pack(params)
    pos = np.tile(start, (pool, 1))
    steps = np.zeros(pool, dtype=np.int64)
    hit = np.full(count, -1, dtype=np.int8)
    out_steps = np.zeros(count, dtype=np.int64)
    out_code = np.empty(pool, dtype=np.int64)
    for lane in range(pool):
        lanes.intake(lane)
    active = np.arange(pool, dtype=np.int64)
    code_map = {CODE_BHIT: 1, CODE_DEATH: 0, CODE_TIMEOUT: 2}
    while active.size:
        lanes.refill(active)
        _kernels.mc_kernel(
            pos, lanes.buf, lanes.ptr, steps, active,
            cand_mask, cand_z, cand_dy,
            scenario.a_level, scenario.b_level, sim_config.max_steps,
            out_code,
        )
        keep = []
        for ii in range(active.size):
            lane = int(active[ii])
            code = int(out_code[ii])
            if code == CODE_NONE:
                keep.append(lane)
                continue
            if code == CODE_ERROR:
                raise NoSolution("one-step reflection failed during simulation")
            rep = int(lanes.lane_rep[lane]) - rep_lo
            hit[rep] = code_map[code]
            out_steps[rep] = steps[lane]
            if lanes.intake(lane) >= 0:
                pos[lane] = start
                steps[lane] = 0
                keep.append(lane)
        active = np.array(keep, dtype=np.int64)
    return {"hit": hit, "steps": out_steps}


# ---------------------------------------------------------------------------
# fixed-factor level splitting


class _SplitRep:
    __slots__ = ("stack", "pending", "n_final", "particles", "timeouts", "capped")

    def __init__(self):
        self.stack = []  # entries (pos array, target, count), LIFO
        self.pending = 0
        self.n_final = 0
        self.particles = 1
        self.timeouts = 0
        self.capped = False


def split_chunk(
    scenario,
    params,
    sim_config,
    split_config,
    sub,
    l0,
    seed,
    rep_lo,
    rep_hi,
    instrument=False,
):
    """Splitting estimator values for a replication range.

    Returns per-rep arrays: estimator value (NaN when the particle cap
    invalidated the replication), stepping-particle counts, timeout event
    counts, cap flags, plus an optional level-entry ledger for the
    conservation checks.
    """
    count = rep_hi - rep_lo
    r_split = split_config.split_r
    delta = split_config.delta
    cap = split_config.particle_cap
    n = scenario.n
    log_r = math.log(r_split)
    start = np.asarray(scenario.start, dtype=float)
    a_level = scenario.a_level
    b_level = scenario.b_level
    values = np.full(count, np.nan)
    particles = np.zeros(count, dtype=np.int64)
    timeouts = np.zeros(count, dtype=np.int64)
    capped = np.zeros(count, dtype=bool)
    ledger = {"entered": {}, "spawned": {}} if instrument else None

    if l0 <= 0:
        values[:] = 1.0
        particles[:] = 1
        return {
            "values": values,
            "particles": particles,
            "timeouts": timeouts,
            "capped": capped,
            "ledger": ledger,
        }

    pool = _chunk_pool(count)
    lanes = _LanePool(
        pool, params.theta, params.sigma_chol, sim_config.h, n,
        seed, "split", rep_lo, rep_hi,
    )
    cand_mask, cand_z, cand_dy = _reflect_pack(params)
    sub_pack = _kernels.pack_subsolution(sub)
    pos = np.tile(start, (pool, 1))
    target = np.full(pool, l0 - 1, dtype=np.int64)
    psteps = np.zeros(pool, dtype=np.int64)
    reps = [None] * pool
    out_code = np.empty(pool, dtype=np.int64)
    lvl_scale = delta / log_r  # importance value = lvl_scale * tbar

    def member_scalar(y: np.ndarray, t: int) -> bool:
        if t == 0:
            return float(y.sum()) >= b_level
        return lvl_scale * tbar(sub, y) <= (t - 1) * delta / n

    def finish(lane: int):
        st = reps[lane]
        rep = int(lanes.lane_rep[lane]) - rep_lo
        particles[rep] = st.particles
        timeouts[rep] = st.timeouts
        capped[rep] = st.capped
        if not st.capped:
            values[rep] = float(r_split) ** (-l0) * st.n_final

    def handle_advance(lane: int, y: np.ndarray):
        # Entered the target level set at y; spawn offspring, cascading
        # through any deeper level sets y already lies in.
        st = reps[lane]
        t = int(target[lane])
        arrivals = 1
        while True:
            if ledger is not None:
                ledger["entered"][t] = ledger["entered"].get(t, 0) + arrivals
                ledger["spawned"][t] = ledger["spawned"].get(t, 0) + arrivals * r_split
            if t == 0:
                st.n_final += arrivals * r_split
                return
            children = arrivals * r_split
            t -= 1
            if member_scalar(y, t):
                arrivals = children
                continue
            if float(y.sum()) <= a_level:
                return  # offspring start inside the absorbing set
            st.pending += children
            if st.pending + 1 > cap:
                st.capped = True
                st.stack.clear()
                st.pending = 0
                return
            st.stack.append((y.copy(), t, children))
            return

    def pop_next(lane: int) -> bool:
        st = reps[lane]
        if st.capped or not st.stack:
            return False
        y, t, cnt = st.stack[-1]
        if cnt == 1:
            st.stack.pop()
        else:
            st.stack[-1] = (y, t, cnt - 1)
        st.pending -= 1
        st.particles += 1
        pos[lane] = y
        target[lane] = t
        psteps[lane] = 0
        return True

    def start_rep(lane: int) -> bool:
        if lanes.intake(lane) < 0:
            return False
        reps[lane] = _SplitRep()
        pos[lane] = start
        target[lane] = l0 - 1
        psteps[lane] = 0
        return True

    active = []
    for lane in range(pool):
        if start_rep(lane):
            active.append(lane)
    active = np.array(active, dtype=np.int64)

    kind, r_scale, inf_b, theta_norm, d_theta, d_mat, c_act, c_inv_ok, c_inv, c_grad = sub_pack
    while active.size:
        lanes.refill(active)
        _kernels.split_kernel(
            pos, lanes.buf, lanes.ptr, target, psteps, active,
            cand_mask, cand_z, cand_dy,
            kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
            c_act, c_inv_ok, c_inv, c_grad,
            lvl_scale, delta, float(n), a_level, b_level, sim_config.max_steps,
            out_code,
        )
        keep = []
        for ii in range(active.size):
            lane = int(active[ii])
            code = int(out_code[ii])
            if code == CODE_NONE:
                keep.append(lane)
                continue
            if code == CODE_ERROR:
                raise NoSolution("one-step reflection failed during simulation")
            st = reps[lane]
            if code == CODE_ADVANCE:
                handle_advance(lane, pos[lane])
            elif code == CODE_TIMEOUT:
                st.timeouts += 1
            if pop_next(lane):
                keep.append(lane)
            else:
                finish(lane)
                if start_rep(lane):
                    keep.append(lane)
        active = np.array(sorted(keep), dtype=np.int64)

    return {
        "values": values,
        "particles": particles,
        "timeouts": timeouts,
        "capped": capped,
        "ledger": ledger,
    }


# ---------------------------------------------------------------------------
# RESTART


class _RestartRep:
    __slots__ = ("stack", "pending", "contrib", "particles", "timeouts", "capped")

    def __init__(self):
        self.stack = []  # entries (pos array, threshold, count, spawn_region)
        self.pending = 0
        self.contrib = 0.0
        self.particles = 1
        self.timeouts = 0
        self.capped = False


def restart_chunk(
    scenario,
    params,
    sim_config,
    split_config,
    sub,
    u0,
    seed,
    rep_lo,
    rep_hi,
    instrument=False,
):
    """RESTART estimator values for a replication range.

    Region indices are recomputed from the subsolution after every step; an
    upward move from region j to region k spawns ``r**(k-j) - 1`` offspring
    with killing thresholds distributed as ``(r-1) r**(alpha-j-1)`` copies at
    threshold alpha.  A particle stopping in the outer set contributes the
    reciprocal of its lineage's multiplication factor (its offspring, all
    stopped on the spot, contribute likewise).
    """
    count = rep_hi - rep_lo
    r_split = split_config.split_r
    cap = split_config.particle_cap
    n = scenario.n
    log_r = math.log(r_split)
    region_scale = n / log_r  # region index = floor(region_scale * (u0 - U))
    start = np.asarray(scenario.start, dtype=float)

    values = np.full(count, np.nan)
    particles = np.zeros(count, dtype=np.int64)
    timeouts = np.zeros(count, dtype=np.int64)
    capped = np.zeros(count, dtype=bool)
    ledger = (
        {"crossings": {}, "offspring": {}, "thresholds": {}} if instrument else None
    )

    pool = _chunk_pool(count)
    lanes = _LanePool(
        pool, params.theta, params.sigma_chol, sim_config.h, n,
        seed, "restart", rep_lo, rep_hi,
    )
    cand_mask, cand_z, cand_dy = _reflect_pack(params)
    sub_pack = _kernels.pack_subsolution(sub)
    pos = np.tile(start, (pool, 1))
    region = np.zeros(pool, dtype=np.int64)
    threshold = np.zeros(pool, dtype=np.int64)
    psteps = np.zeros(pool, dtype=np.int64)
    reps = [None] * pool
    out_code = np.empty(pool, dtype=np.int64)
    out_j = np.empty(pool, dtype=np.int64)
    out_k = np.empty(pool, dtype=np.int64)

    def record_crossing(j: int, k: int):
        ledger["crossings"][(j, k)] = ledger["crossings"].get((j, k), 0) + 1
        ledger["offspring"][(j, k)] = (
            ledger["offspring"].get((j, k), 0) + r_split ** (k - j) - 1
        )
        for alpha in range(j + 1, k + 1):
            key = (j, k, alpha)
            ledger["thresholds"][key] = (
                ledger["thresholds"].get(key, 0)
                + (r_split - 1) * r_split ** (alpha - j - 1)
            )

    def finish(lane: int):
        st = reps[lane]
        rep = int(lanes.lane_rep[lane]) - rep_lo
        particles[rep] = st.particles
        timeouts[rep] = st.timeouts
        capped[rep] = st.capped
        if not st.capped:
            values[rep] = st.contrib

    def pop_next(lane: int) -> bool:
        st = reps[lane]
        if st.capped or not st.stack:
            return False
        y, thr, cnt, spawn_region = st.stack[-1]
        if cnt == 1:
            st.stack.pop()
        else:
            st.stack[-1] = (y, thr, cnt - 1, spawn_region)
        st.pending -= 1
        st.particles += 1
        pos[lane] = y
        threshold[lane] = thr
        region[lane] = spawn_region
        psteps[lane] = 0
        return True

    def start_rep(lane: int) -> bool:
        if lanes.intake(lane) < 0:
            return False
        reps[lane] = _RestartRep()
        pos[lane] = start
        region[lane] = 0
        threshold[lane] = 0
        psteps[lane] = 0
        return True

    active = []
    for lane in range(pool):
        if start_rep(lane):
            active.append(lane)
    active = np.array(active, dtype=np.int64)

    kind, r_scale, inf_b, theta_norm, d_theta, d_mat, c_act, c_inv_ok, c_inv, c_grad = sub_pack
    while active.size:
        lanes.refill(active)
        _kernels.restart_kernel(
            pos, lanes.buf, lanes.ptr, region, threshold, psteps, active,
            cand_mask, cand_z, cand_dy,
            kind, r_scale, inf_b, theta_norm, d_theta, d_mat,
            c_act, c_inv_ok, c_inv, c_grad,
            u0, region_scale, scenario.a_level, scenario.b_level, sim_config.max_steps,
            out_code, out_j, out_k,
        )
        keep = []
        for ii in range(active.size):
            lane = int(active[ii])
            code = int(out_code[ii])
            if code == CODE_NONE:
                keep.append(lane)
                continue
            if code == CODE_ERROR:
                raise NoSolution("one-step reflection failed during simulation")
            st = reps[lane]
            if code == CODE_UP:
                j_prev = int(out_j[ii])
                k_now = int(out_k[ii])
                spawned = r_split ** (k_now - j_prev) - 1
                if ledger is not None:
                    record_crossing(j_prev, k_now)
                st.pending += spawned
                if st.pending + 1 > cap:
                    st.capped = True
                    st.stack.clear()
                    st.pending = 0
                    finish(lane)
                    if start_rep(lane):
                        keep.append(lane)
                    continue
                y = pos[lane].copy()
                for alpha in range(j_prev + 1, k_now + 1):
                    cnt = (r_split - 1) * r_split ** (alpha - j_prev - 1)
                    st.stack.append((y, alpha, cnt, k_now))
                keep.append(lane)
                continue
            if code == CODE_BHIT:
                j_prev = int(out_j[ii])
                k_now = int(out_k[ii])
                mult = r_split ** (k_now - j_prev) if k_now > j_prev else 1
                if ledger is not None and k_now > j_prev:
                    record_crossing(j_prev, k_now)
                st.contrib += mult * float(r_split) ** (-k_now)
            elif code == CODE_TIMEOUT:
                st.timeouts += 1
            if pop_next(lane):
                keep.append(lane)
            else:
                finish(lane)
                if start_rep(lane):
                    keep.append(lane)
        active = np.array(sorted(keep), dtype=np.int64)

    return {
        "values": values,
        "particles": particles,
        "timeouts": timeouts,
        "capped": capped,
        "ledger": ledger,
    }


# ---------------------------------------------------------------------------
# chunk dispatch


def _run_chunk_task(payload):
    kind = payload[0]
    if kind == "mc":
        _, scenario, params, sim_config, seed, lo, hi = payload
        return mc_chunk(scenario, params, sim_config, seed, lo, hi)
    if kind == "split":
        (_, scenario, params, sim_config, split_config, sub, l0, seed, lo, hi, inst) = payload
        return split_chunk(
            scenario, params, sim_config, split_config, sub, l0, seed, lo, hi, inst
        )
    (_, scenario, params, sim_config, split_config, sub, u0, seed, lo, hi, inst) = payload
    return restart_chunk(
        scenario, params, sim_config, split_config, sub, u0, seed, lo, hi, inst
    )


def _merge_ledgers(parts):
    merged = None
    for part in parts:
        if part is None:
            continue
        if merged is None:
            merged = {key: dict(val) for key, val in part.items()}
            continue
        for key, table in part.items():
            dst = merged.setdefault(key, {})
            for entry, cnt in table.items():
                dst[entry] = dst.get(entry, 0) + cnt
    return merged


def run_chunked(payloads, threads: int = 1):
    """Run chunk payloads, in order, optionally across worker processes.

    Every chunk's result depends only on its own replication streams, so the
    worker count cannot change any output value.
    """
    if threads <= 1 or len(payloads) <= 1:
        return [_run_chunk_task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_chunk_task, payloads))
