"""Grid-sampled path laws: absorbed Brownian motion, Bessel(3), excursions.

All samplers are deterministic functions of their arguments and a
:class:`SeedSpec`. Paths live on uniform time grids; absorption of Brownian
motion uses the within-step Brownian-bridge hitting probability
exp(-2 a b / dt) to decide zero crossings the grid cannot see, which removes
the O(sqrt(dt)) lifetime bias of naive grid detection. Bessel(3) paths are
the Euclidean norm of a 3-component Gaussian walk, so their grid marginals
are exact for any dt and the start at 0 is well posed.

Excursions conditioned on {max > a} are built by the maximum decomposition:
draw the maximum M from its normalized law a/y^2 on (a, inf) by inverse CDF
(M = a/V, V uniform), then glue a first-passage Bessel(3) segment 0 -> M to
the time reversal of an independent one. The conditioning event has measure
1/a under the excursion measure. The literature's equivalent description via
two Bessel(3) processes run until they first hit M yields the same law; the
first-passage form is what is implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import ChunkedDraws, SeedSpec

_BLOCK = 1 << 13
DEFAULT_MAX_STEPS = 1 << 31


@dataclass
class SampledPath:
    """Nonnegative path on a uniform grid with an absorption marker.

    ``values[k]`` is the path at time ``k * dt``. ``zeta_index`` marks
    absorption at 0 (values are 0 there and after); ``open_ended`` marks a
    path truncated by a time cap rather than ended by its own law.
    """

    dt: float
    values: np.ndarray
    zeta_index: Optional[int] = None
    open_ended: bool = False
    origin_note: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("values must be a nonempty 1-d array")
        if np.any(self.values < 0):
            raise ValueError("path values must be nonnegative")
        z = self.zeta_index
        if z is not None:
            if not (0 < z < self.values.size):
                raise ValueError("zeta_index out of range")
            if np.any(self.values[z:] != 0.0):
                raise ValueError("values after absorption must be 0")
            if np.any(self.values[1:z] <= 0.0):
                raise ValueError("values strictly between start and absorption must be positive")

    @property
    def n_steps(self) -> int:
        return self.values.size - 1

    @property
    def lifetime(self) -> Optional[float]:
        return None if self.zeta_index is None else self.zeta_index * self.dt

    @property
    def maximum(self) -> float:
        return float(self.values.max())

    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * self.dt

    def first_passage_index(self, x: float) -> Optional[int]:
        """First grid index with value >= x, or None."""
        hits = np.nonzero(self.values >= x)[0]
        return int(hits[0]) if hits.size else None

    def to_csv(self, path_or_file) -> None:
        header = (
            f"dt={self.dt!r} zeta_index={self.zeta_index} "
            f"open_ended={self.open_ended} origin={self.origin_note}"
        )
        data = np.column_stack([self.times(), self.values])
        np.savetxt(path_or_file, data, delimiter=",", header=header, comments="# ")

    @classmethod
    def from_csv(cls, path) -> "SampledPath":
        with open(path) as fh:
            header = fh.readline()
        if not header.startswith("# "):
            raise ValueError("missing path header line")
        fields = dict(tok.split("=", 1) for tok in header[2:].split())
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        zeta = fields["zeta_index"]
        return cls(
            dt=float(fields["dt"]),
            values=data[:, 1],
            zeta_index=None if zeta == "None" else int(zeta),
            open_ended=fields["open_ended"] == "True",
            origin_note=fields.get("origin", "").strip(),
        )


def sample_bm_absorbed(
    x: float, dt: float, t_max: float, seed: SeedSpec
) -> SampledPath:
    """Brownian motion from x > 0 absorbed at the origin.

    Gaussian increments of variance dt; a step from a to b is declared
    absorbed when b <= 0 or with the bridge probability exp(-2ab/dt), in
    which case the path is zero from the next grid point on. If t_max is
    reached alive the path is returned with the open-ended marker set.
    """
    if x <= 0:
        raise ValueError("start must be positive")
    if dt <= 0 or t_max <= 0:
        raise ValueError("dt and t_max must be positive")
    draws = ChunkedDraws(seed, chunk=_BLOCK)
    n_max = max(1, int(round(t_max / dt)))
    sqdt = np.sqrt(dt)
    pieces = [np.array([x])]
    last = x
    done = 0
    while done < n_max:
        k = min(_BLOCK, n_max - done)
        z = draws.normals(k)
        u = draws.uniforms(k)
        vals = last + sqdt * np.cumsum(z)
        prev = np.empty(k)
        prev[0] = last
        prev[1:] = vals[:-1]
        with np.errstate(over="ignore"):
            p_hit = np.exp(-2.0 * prev * vals / dt)
        trigger = np.nonzero(u < p_hit)[0]
        if trigger.size:
            i = int(trigger[0])
            pieces.append(vals[:i])
            pieces.append(np.array([0.0]))
            values = np.concatenate(pieces)
            return SampledPath(
                dt=dt,
                values=values,
                zeta_index=values.size - 1,
                origin_note=f"bm_absorbed(x={x:g})",
            )
        pieces.append(vals)
        last = float(vals[-1])
        done += k
    return SampledPath(
        dt=dt,
        values=np.concatenate(pieces),
        zeta_index=None,
        open_ended=True,
        origin_note=f"bm_absorbed(x={x:g},t_max={t_max:g})",
    )


def _bes3_segment_to_level(
    start: float, level: float, dt: float, draws: ChunkedDraws, max_steps: int
) -> np.ndarray:
    """Bessel(3) values from ``start`` until first grid value >= level.

    Exact at grid points: norm of a 3-component Gaussian walk started at
    (start, 0, 0). The final value is clamped to the level.
    """
    sqdt = np.sqrt(dt)
    w = np.array([start, 0.0, 0.0])
    pieces = [np.array([start])]
    steps = 0
    while True:
        if steps >= max_steps:
            raise RuntimeError(
                f"first-passage safety cap hit: level={level:g} not reached "
                f"after {steps} steps of dt={dt:g}"
            )
        k = min(_BLOCK, max_steps - steps)
        z = draws.normals(3 * k).reshape(k, 3)
        walk = w + sqdt * np.cumsum(z, axis=0)
        vals = np.sqrt(np.einsum("ij,ij->i", walk, walk))
        hits = np.nonzero(vals >= level)[0]
        if hits.size:
            i = int(hits[0])
            seg = vals[: i + 1].copy()
            seg[-1] = level
            pieces.append(seg)
            return np.concatenate(pieces)
        pieces.append(vals)
        w = walk[-1]
        steps += k


def sample_bes3(x: float, dt: float, t_max: float, seed: SeedSpec) -> SampledPath:
    """Three-dimensional Bessel path from x >= 0; never absorbed."""
    if x < 0:
        raise ValueError("start must be nonnegative")
    if dt <= 0 or t_max <= 0:
        raise ValueError("dt and t_max must be positive")
    rng = seed.generator()
    n = max(1, int(round(t_max / dt)))
    z = rng.standard_normal((n, 3))
    walk = np.array([x, 0.0, 0.0]) + np.sqrt(dt) * np.cumsum(z, axis=0)
    vals = np.empty(n + 1)
    vals[0] = x
    vals[1:] = np.sqrt(np.einsum("ij,ij->i", walk, walk))
    return SampledPath(
        dt=dt,
        values=vals,
        zeta_index=None,
        open_ended=True,
        origin_note=f"bes3(x={x:g},t_max={t_max:g})",
    )


def sample_bes3_first_passage(
    a: float,
    dt: float,
    seed: SeedSpec,
    start: float = 0.0,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> SampledPath:
    """Bessel(3) from ``start`` run to its first passage of level a.

    The overshoot at the crossing is clamped to a (bias O(sqrt(dt)),
    documented, not corrected). Finite almost surely; a configurable step cap
    guards runaway loops.
    """
    if a <= 0 or not (0 <= start < a):
        raise ValueError("need 0 <= start < a")
    draws = ChunkedDraws(seed, chunk=_BLOCK)
    values = _bes3_segment_to_level(start, a, dt, draws, max_steps)
    return SampledPath(
        dt=dt,
        values=values,
        zeta_index=None,
        origin_note=f"bes3_first_passage(a={a:g},start={start:g})",
    )


def time_reverse(p: SampledPath) -> SampledPath:
    """Values reversed in index order; grid step preserved."""
    if p.open_ended:
        raise ValueError("cannot reverse an open-ended (time-capped) path")
    rev = p.values[::-1].copy()
    zeta = rev.size - 1 if rev[-1] == 0.0 else None
    if zeta is not None and np.any(rev[1:zeta] <= 0.0):
        zeta = None  # reversal of a path with interior zeros is not absorbed-form
    return SampledPath(
        dt=p.dt,
        values=rev,
        zeta_index=zeta,
        origin_note=f"reverse({p.origin_note})",
    )


def draw_excursion_max(
    a: float, n: int, seed: SeedSpec, m_cap: Optional[float] = None
) -> np.ndarray:
    """Exact samples of the excursion maximum given {max > a}.

    Inverse CDF of the normalized maximum law a/y^2 dy on (a, inf):
    M = a/V with V uniform on (0, 1), or on [a/m_cap, 1) when conditioning
    additionally on {max <= m_cap}. This is the law of ``maximum`` of the
    paths produced by :func:`sample_excursion_given_max` (clamping makes the
    path maximum equal the drawn level exactly).
    """
    if a <= 0:
        raise ValueError("a must be positive")
    if m_cap is not None and m_cap <= a:
        raise ValueError("m_cap must exceed a")
    rng = seed.generator()
    lo = 0.0 if m_cap is None else a / m_cap
    v = lo + (1.0 - lo) * rng.random(n)
    return a / v


def sample_excursion_given_max(
    a: float,
    dt: float,
    seed: SeedSpec,
    m_cap: Optional[float] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> SampledPath:
    """One excursion under the excursion measure conditioned on {max > a}.

    Maximum decomposition: draw M by inverse CDF (see
    :func:`draw_excursion_max`), then concatenate a Bessel(3) first-passage
    path 0 -> M with the time reversal of an independent one. The junction
    value is M on both sides; the path is 0 at both ends and strictly
    positive in between at grid resolution. The conditioning event has
    excursion-measure mass 1/a.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    draws = ChunkedDraws(seed, chunk=_BLOCK)
    lo = 0.0 if m_cap is None else a / m_cap
    v = lo + (1.0 - lo) * float(draws.uniforms(1)[0])
    m_level = a / v
    up = _bes3_segment_to_level(0.0, m_level, dt, draws, max_steps)
    down = _bes3_segment_to_level(0.0, m_level, dt, draws, max_steps)[::-1]
    values = np.concatenate([up, down[1:]])
    return SampledPath(
        dt=dt,
        values=values,
        zeta_index=values.size - 1,
        origin_note=f"excursion_given_max(a={a:g},M={m_level:g})",
    )


def rescale_path(p: SampledPath, lambda1: float, lambda2: float) -> SampledPath:
    """Space-time rescaling e(lambda1 * t) / lambda2 by grid relabeling.

    lambda1 adjusts dt (no resampling), lambda2 divides values; the lifetime
    index is preserved, so zeta scales by 1/lambda1.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise ValueError("scaling factors must be positive")
    return SampledPath(
        dt=p.dt / lambda1,
        values=p.values / lambda2,
        zeta_index=p.zeta_index,
        open_ended=p.open_ended,
        origin_note=f"rescale({p.origin_note},{lambda1:g},{lambda2:g})",
    )
