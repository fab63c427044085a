"""The additive-functional clock of a string and time-changed path laws.

For a path e with local time field l(t, x) and a string m, the clock is
A(t) = int l(t, x) dm(x). It is evaluated as a per-step Riemann sum: step s
with midpoint value v contributes rho(v) * dt / 2 for the absolutely
continuous part of dm (the occupation identity makes this the integral of
l against the density) and c * dt / (2h) for every atom (location, c) whose
bin contains v. Atoms are assigned to their containing bin exactly; the
constant-density string with rho = 2 yields A(t) = min(t, zeta) up to float
accumulation, which is the accounting anchor for everything downstream.

Densities unbounded near 0 get a sub-resolution clamp: midpoints below
``x_floor`` (default half a space-step, sqrt(dt)/2) are evaluated at the
floor. Occupation below the floor is not resolved by a uniform grid anyway;
without the clamp the per-step weight rho(V) has infinite mean for densities
x^p with p <= -1.

The clock of a string outside the exit class (integral of x dm near 0
infinite) diverges along almost every excursion, so building it silently
would be wrong; ``additive_functional`` refuses unless overridden, which the
divergence experiments do deliberately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .localtime import LocalTimeField, occupation_field
from .rng import SeedSpec
from .samplers import (
    SampledPath,
    sample_bes3,
    sample_bm_absorbed,
    sample_excursion_given_max,
)
from .strings import StringModel, classify


class NotTimeChangeableError(ValueError):
    """The string's clock is almost surely infinite (origin not exit)."""


@dataclass
class MonotoneFunctional:
    """Grid-sampled nondecreasing function with a terminal plateau.

    ``values[k]`` is the function at source time k * dt; after ``zeta_index``
    (when set) the function is constant at its terminal value.
    """

    dt: float
    values: np.ndarray
    zeta_index: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("values must be a nonempty 1-d array")
        if self.values[0] != 0.0:
            raise ValueError("a clock starts at 0")
        if np.any(np.diff(self.values) < 0):
            raise ValueError("clock must be nondecreasing")

    @property
    def terminal(self) -> float:
        return float(self.values[-1])

    def __call__(self, t) -> np.ndarray:
        tt = np.minimum(np.asarray(t, dtype=float), (self.values.size - 1) * self.dt)
        return np.interp(tt, np.arange(self.values.size) * self.dt, self.values)

    def inverse_at(self, s) -> np.ndarray:
        """Right-continuous piecewise-linear inverse; terminal beyond the plateau.

        inverse_at(values(t)) = min(t, zeta) within one source grid step; for
        s at or beyond the terminal value the inverse is the lifetime.
        """
        s = np.asarray(s, dtype=float)
        v = self.values
        zeta = (self.zeta_index if self.zeta_index is not None else v.size - 1) * self.dt
        idx = np.searchsorted(v, s, side="right")
        idx = np.clip(idx, 1, v.size - 1)
        v_lo = v[idx - 1]
        v_hi = v[idx]
        t_lo = (idx - 1) * self.dt
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(v_hi > v_lo, (s - v_lo) / (v_hi - v_lo), 1.0)
        out = t_lo + np.clip(frac, 0.0, 1.0) * self.dt
        out = np.where(s >= self.terminal, zeta, out)
        out = np.where(s <= 0.0, 0.0, out)
        return out if out.ndim else float(out)

    def inverse(self, new_dt: Optional[float] = None) -> "MonotoneFunctional":
        """The inverse clock, itself grid-sampled (step ``new_dt``)."""
        if new_dt is None:
            new_dt = self.dt
        n = int(np.floor(self.terminal / new_dt)) + 1
        grid = np.arange(n + 1) * new_dt
        vals = np.asarray(self.inverse_at(grid), dtype=float)
        return MonotoneFunctional(dt=new_dt, values=vals)

    def to_csv(self, path_or_file) -> None:
        data = np.column_stack([np.arange(self.values.size) * self.dt, self.values])
        np.savetxt(path_or_file, data, delimiter=",", header="t,A", comments="")


def step_weights(
    field: LocalTimeField,
    m: StringModel,
    x_min: float = 0.0,
    x_floor: Optional[float] = None,
) -> np.ndarray:
    """Per-step clock increments for the string m over this field.

    ``x_min`` drops the measure below that level (truncated clock, used by
    the divergence experiments); ``x_floor`` is the sub-resolution clamp
    (default sqrt(dt)/2; pass 0 to disable).
    """
    if x_floor is None:
        x_floor = 0.5 * np.sqrt(field.dt)
    mids = field.step_mid
    v_eff = np.maximum(mids, x_floor) if x_floor > 0 else mids
    w = np.asarray(m.density(v_eff), dtype=float) * (field.dt / 2.0)
    if np.any(~np.isfinite(w)):
        raise FloatingPointError(
            f"non-finite clock increment for string {m.label!r}; "
            "consider a positive x_floor"
        )
    if x_min > 0.0:
        w = np.where(mids >= x_min, w, 0.0)
    for loc, mass in m.atoms:
        j = field.bin_of(loc)
        if x_min > 0.0 and loc < x_min:
            continue
        w = w + (field.step_bins == j) * (mass * field.dt / (2.0 * field.h))
    return w


def additive_functional(
    field: LocalTimeField,
    m: StringModel,
    x_min: float = 0.0,
    x_floor: Optional[float] = None,
    override_class_check: bool = False,
) -> MonotoneFunctional:
    """Clock A(t) = int l(t, x) dm(x) evaluated on the source grid.

    Refuses strings outside the exit class (clock a.s. infinite) unless
    ``override_class_check`` is set; the divergence experiments override to
    drive the divergent case deliberately.
    """
    if not override_class_check:
        report = classify(m)
        if report.in_M is False:
            raise NotTimeChangeableError(
                f"string {m.label!r} is not in the exit class (integral of "
                "x dm near 0 diverges): its clock is almost surely infinite. "
                "Pass override_class_check=True to build a truncated clock "
                "anyway."
            )
    w = step_weights(field, m, x_min=x_min, x_floor=x_floor)
    values = np.empty(w.size + 1)
    values[0] = 0.0
    np.cumsum(w, out=values[1:])
    return MonotoneFunctional(dt=field.dt, values=values, zeta_index=field.zeta_index)


def inverse(a: MonotoneFunctional, new_dt: Optional[float] = None) -> MonotoneFunctional:
    """Module-level alias for :meth:`MonotoneFunctional.inverse`."""
    return a.inverse(new_dt)


def time_change_path(
    p: SampledPath, a: MonotoneFunctional, new_dt: float
) -> SampledPath:
    """The time-changed path e_m(t) = e(A^{-1}(t)) resampled on a new grid.

    The output lifetime is the clock's terminal value A(zeta); the maximum is
    preserved up to interpolation error.
    """
    if new_dt <= 0:
        raise ValueError("new_dt must be positive")
    counted = (p.zeta_index + 1) if p.zeta_index is not None else p.values.size
    if a.values.size != counted:
        raise ValueError("clock grid does not match the path grid")
    terminal = a.terminal
    n_alive = int(np.ceil(terminal / new_dt - 1e-12))
    grid = np.arange(n_alive + 1) * new_dt
    src_times = np.asarray(a.inverse_at(grid), dtype=float)
    t_axis = np.arange(p.values.size) * p.dt
    vals = np.interp(src_times, t_axis, p.values)
    absorbed = p.zeta_index is not None
    if absorbed:
        vals[-1] = 0.0
        zeta_index = n_alive
        vals[:1] = p.values[:1]
        # interior values of an absorbed path are positive; interpolation at
        # src times strictly inside (0, zeta) keeps them positive
        np.clip(vals[1:-1], np.finfo(float).tiny, None, out=vals[1:-1])
    else:
        zeta_index = None
    return SampledPath(
        dt=new_dt,
        values=vals,
        zeta_index=zeta_index,
        open_ended=p.open_ended,
        origin_note=f"timechange({p.origin_note})",
    )


DEFAULT_H_FRACTION = 0.005  # bin width = fraction of the path maximum


def _pipeline(
    p: SampledPath,
    m: StringModel,
    new_dt: float,
    h: Optional[float],
    x_min: float,
    x_floor: Optional[float],
) -> SampledPath:
    if h is None:
        h = DEFAULT_H_FRACTION * max(p.maximum, 1e-12)
    field = occupation_field(p, h)
    clock = additive_functional(field, m, x_min=x_min, x_floor=x_floor)
    return time_change_path(p, clock, new_dt)


def sample_Qm(
    x: float,
    m: StringModel,
    dt: float,
    new_dt: float,
    seed: SeedSpec,
    t_max: float = 200.0,
    h: Optional[float] = None,
    x_min: float = 0.0,
    x_floor: Optional[float] = None,
) -> SampledPath:
    """One path of the m-diffusion from x > 0 absorbed at the origin.

    Pipeline: absorbed Brownian source path -> occupation field -> clock ->
    time change. The source cap ``t_max`` leaves rare long source paths
    open-ended; callers that condition on lifetimes should check the marker.
    """
    src = sample_bm_absorbed(x, dt, t_max, seed)
    return _pipeline(src, m, new_dt, h, x_min, x_floor)


def sample_Pm(
    x: float,
    m: StringModel,
    dt: float,
    new_dt: float,
    seed: SeedSpec,
    t_max: float = 50.0,
    h: Optional[float] = None,
    x_min: float = 0.0,
    x_floor: Optional[float] = None,
) -> SampledPath:
    """One path of the upward-conditioned m-diffusion (speed x^2 dm, scale -1/x).

    Same pipeline with a Bessel(3) source, truncated at t_max (transient).
    """
    src = sample_bes3(x, dt, t_max, seed)
    return _pipeline(src, m, new_dt, h, x_min, x_floor)


def sample_excursion_nm(
    a: float,
    m: StringModel,
    dt: float,
    new_dt: float,
    seed: SeedSpec,
    m_cap: Optional[float] = None,
    h: Optional[float] = None,
    x_min: float = 0.0,
    x_floor: Optional[float] = None,
) -> SampledPath:
    """One sample of the generalized excursion measure given {max > a}.

    Time change of a Brownian excursion conditioned on {max > a}; the
    maximum is invariant under time change, so the conditioning event keeps
    measure 1/a under the pushforward. ``m_cap`` additionally conditions on
    {max <= m_cap} (exact truncation of the maximum law).
    """
    src = sample_excursion_given_max(a, dt, seed, m_cap=m_cap)
    return _pipeline(src, m, new_dt, h, x_min, x_floor)
