"""Per-path simulation kernels with level-adaptive time steps.

The clock integral int rho(e(s)) ds / 2 of a speed density singular at 0
needs time resolution dt ~ x^2 near level x; a uniform grid cannot see
occupation below its own sqrt(dt). The kernels step with

    dt(x) = clip(((x - anchor) / res)^2, dt_min, dt_max)   (dt_min below anchor)

which is exact in law (the step size depends only on the current state), and
accumulate the clock online, banded by truncation levels: bucket j collects
the contribution of step midpoints in [x_bands[j], x_bands[j+1]), the last
band being unbounded. Truncated clocks are suffix sums of the buckets;
occupation times of spatial bands are 2x the buckets of a unit density.

Brownian steps decide absorption with the within-step bridge probability
exp(-2ab/dt); Bessel(3) steps update a 3-component Gaussian state, so grid
marginals are exact for any step sequence.

Kernels are resumable: they consume pre-drawn arrays from one counter-based
stream and return with status RUNNING when the chunk is exhausted, so the
consumed randomness is a pure function of the stream, independent of chunk
sizes and worker scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .rng import ChunkedDraws, SeedSpec

# status codes
RUNNING = 0
ABSORBED = 1
CAPPED = 2
TIMED_OUT = 3
CLOCK_DONE = 4
LEVEL_REACHED = 5

# density kinds
RHO_POWER = 0  # c0 * x**c1
RHO_LOGFAM = 1  # c0 / (1 + c1 * x)
RHO_CONST = 2  # c0

_MAX_TOTAL_DRAWS = 1 << 34


@njit(inline="always")
def _rho(kind, c0, c1, x):
    if kind == RHO_POWER:
        return c0 * x ** c1
    elif kind == RHO_LOGFAM:
        return c0 / (1.0 + c1 * x)
    return c0


@njit(inline="always")
def _dt_of(x, anchor, res, dt_min, dt_max):
    y = x - anchor
    if y <= 0.0:
        return dt_min
    dt = (y / res) ** 2
    if dt < dt_min:
        return dt_min
    if dt > dt_max:
        return dt_max
    return dt


@njit(cache=True, nogil=True)
def bm_clock_step(
    fs,
    st,
    buckets,
    marginals,
    x_bands,
    targets,
    kind,
    c0,
    c1,
    x_floor,
    anchor,
    res,
    dt_min,
    dt_max,
    m_cap,
    t_max,
    stop_clock,
    normals,
    uniforms,
):
    """Advance one absorbed-Brownian path; returns draws consumed.

    fs = [x, clock, t]; st = [status, next_target, steps]. The clock counts
    only midpoints at or above x_bands[0]; midpoints below x_floor are
    evaluated at the floor. Marginal values are recorded at the step whose
    clock first reaches each target.
    """
    n = normals.shape[0]
    pos = 0
    x = fs[0]
    clock = fs[1]
    t = fs[2]
    status = st[0]
    nt = st[1]
    steps = st[2]
    nb = x_bands.shape[0]
    ntg = targets.shape[0]
    while status == RUNNING and pos < n:
        dt = _dt_of(x, anchor, res, dt_min, dt_max)
        z = normals[pos]
        u = uniforms[pos]
        pos += 1
        xn = x + np.sqrt(dt) * z
        hit = False
        if xn <= 0.0:
            hit = True
        else:
            if u < np.exp(-2.0 * x * xn / dt):
                hit = True
        v = 0.5 * x if hit else 0.5 * (x + xn)
        ve = v if v > x_floor else x_floor
        j = nb - 1
        while j >= 0 and v < x_bands[j]:
            j -= 1
        if j >= 0:
            w = _rho(kind, c0, c1, ve) * dt * 0.5
            buckets[j] += w
            clock += w
            while nt < ntg and clock >= targets[nt]:
                marginals[nt] = 0.0 if hit else xn
                nt += 1
        t += dt
        steps += 1
        if hit:
            status = ABSORBED
            x = 0.0
        else:
            x = xn
            if x >= m_cap:
                status = CAPPED
            elif t >= t_max:
                status = TIMED_OUT
            elif clock >= stop_clock and nt >= ntg:
                status = CLOCK_DONE
    fs[0] = x
    fs[1] = clock
    fs[2] = t
    st[0] = status
    st[1] = nt
    st[2] = steps
    return pos


@njit(cache=True, nogil=True)
def bes3_clock_step(
    fs,
    st,
    buckets,
    x_bands,
    kind,
    c0,
    c1,
    x_floor,
    anchor,
    res,
    dt_min,
    dt_max,
    level,
    record_level,
    t_max,
    normals,
):
    """Advance one Bessel(3) path toward its first passage of ``level``.

    fs = [wx, wy, wz, r, clock, t, clock_at_record]; st = [status, steps,
    recorded]. The midpoint of the crossing step is clamped to the level,
    matching the clamped path sampler. ``clock_at_record`` snapshots the
    clock at the first passage of ``record_level``.
    """
    n = normals.shape[0]
    pos = 0
    wx = fs[0]
    wy = fs[1]
    wz = fs[2]
    r = fs[3]
    clock = fs[4]
    t = fs[5]
    rec = fs[6]
    status = st[0]
    steps = st[1]
    recorded = st[2]
    nb = x_bands.shape[0]
    while status == RUNNING and pos + 3 <= n:
        dt = _dt_of(r, anchor, res, dt_min, dt_max)
        s = np.sqrt(dt)
        wx += s * normals[pos]
        wy += s * normals[pos + 1]
        wz += s * normals[pos + 2]
        pos += 3
        rn = np.sqrt(wx * wx + wy * wy + wz * wz)
        rn_c = rn if rn < level else level
        v = 0.5 * (r + rn_c)
        ve = v if v > x_floor else x_floor
        j = nb - 1
        while j >= 0 and v < x_bands[j]:
            j -= 1
        if j >= 0:
            w = _rho(kind, c0, c1, ve) * dt * 0.5
            buckets[j] += w
            clock += w
        t += dt
        steps += 1
        if recorded == 0 and rn >= record_level:
            rec = clock
            recorded = 1
        if rn >= level:
            status = LEVEL_REACHED
            r = level
        else:
            r = rn
            if t >= t_max:
                status = TIMED_OUT
    fs[0] = wx
    fs[1] = wy
    fs[2] = wz
    fs[3] = r
    fs[4] = clock
    fs[5] = t
    fs[6] = rec
    st[0] = status
    st[1] = steps
    st[2] = recorded
    return pos


def density_kernel_params(m) -> tuple:
    """(kind, c0, c1) for a StringModel the kernels can evaluate, or None."""
    if getattr(m, "power_form", None) is not None:
        c0, p = m.power_form
        if p == 0.0:
            return (RHO_CONST, float(c0), 0.0)
        return (RHO_POWER, float(c0), float(p))
    if getattr(m, "log_form", None) is not None:
        c0, c1 = m.log_form
        return (RHO_LOGFAM, float(c0), float(c1))
    return None


def run_bm_clock(
    seed: SeedSpec,
    x0: float,
    density: tuple,
    x_bands=(0.0,),
    targets=(),
    x_floor: float = 0.0,
    anchor: float = 0.0,
    res: float = 25.0,
    dt_min: float = 1e-12,
    dt_max: float = 1e-3,
    m_cap: float = np.inf,
    t_max: float = np.inf,
    stop_clock: float = np.inf,
) -> dict:
    """Run one absorbed-Brownian clock path to completion."""
    kind, c0, c1 = density
    fs = np.array([float(x0), 0.0, 0.0])
    st = np.zeros(3, dtype=np.int64)
    x_bands = np.asarray(x_bands, dtype=float)
    targets = np.asarray(targets, dtype=float)
    buckets = np.zeros(x_bands.size)
    marginals = np.full(targets.size, np.nan)
    draws = ChunkedDraws(seed, chunk=1 << 6)
    total = 0
    while st[0] == RUNNING:
        z = draws.normals()
        u = draws.uniforms(z.size)
        bm_clock_step(
            fs, st, buckets, marginals, x_bands, targets,
            kind, c0, c1, x_floor, anchor, res, dt_min, dt_max,
            m_cap, t_max, stop_clock, z, u,
        )
        total += z.size
        if total > _MAX_TOTAL_DRAWS:
            raise RuntimeError("bm clock path exceeded the draw safety cap")
        draws.grow()
    return {
        "status": int(st[0]),
        "clock": float(fs[1]),
        "t_source": float(fs[2]),
        "steps": int(st[2]),
        "buckets": buckets,
        "marginals": marginals,
        "final_value": float(fs[0]),
    }


def run_bes3_clock(
    draws: ChunkedDraws,
    density: tuple,
    level: float = np.inf,
    start: float = 0.0,
    x_bands=(0.0,),
    x_floor: float = 0.0,
    anchor: float = 0.0,
    res: float = 25.0,
    dt_min: float = 1e-12,
    dt_max: float = 1e-3,
    record_level: float = np.inf,
    t_max: float = np.inf,
) -> dict:
    """Run one Bessel(3) clock segment; ``draws`` may be shared by segments."""
    kind, c0, c1 = density
    fs = np.zeros(7)
    fs[0] = float(start)
    fs[3] = float(start)
    st = np.zeros(3, dtype=np.int64)
    x_bands = np.asarray(x_bands, dtype=float)
    buckets = np.zeros(x_bands.size)
    total = 0
    while st[0] == RUNNING:
        z = draws.normals()
        bes3_clock_step(
            fs, st, buckets, x_bands,
            kind, c0, c1, x_floor, anchor, res, dt_min, dt_max,
            level, record_level, t_max, z,
        )
        total += z.size
        if total > _MAX_TOTAL_DRAWS:
            raise RuntimeError("bes3 clock segment exceeded the draw safety cap")
        draws.grow()
    return {
        "status": int(st[0]),
        "clock": float(fs[4]),
        "clock_at_record": float(fs[6]) if st[2] else None,
        "t_source": float(fs[5]),
        "steps": int(st[1]),
        "buckets": buckets,
        "final_value": float(fs[3]),
    }
