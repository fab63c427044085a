"""Binned occupation-density estimate of the local time field of a path.

The local time normalization used throughout the package is the one in which
int_0^t f(e(s)) ds = 2 * int f(x) l(t, x) dx, so the estimator divides bin
occupation by twice the bin width. Every grid step is attributed to exactly
one bin (the bin of the step's midpoint value), which makes the accounting
identity sum_j O(t, j) = min(t, zeta) exact per path; that identity anchors
every additive-functional test downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .samplers import SampledPath


@dataclass
class LocalTimeField:
    """Occupation field of one path on uniform spatial bins [k h, (k+1) h).

    ``step_bins[s]`` is the bin of step s (time [s dt, (s+1) dt)); cumulative
    occupation and the estimator l_hat(t, x) = occupation / (2h) are derived
    views. Immutable after construction.
    """

    h: float
    dt: float
    n_bins: int
    step_bins: np.ndarray  # int32, one entry per counted step
    step_mid: np.ndarray  # midpoint value of each counted step
    zeta_index: Optional[int]  # absorption index of the source path

    @property
    def x_edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) * self.h

    @property
    def n_steps(self) -> int:
        return int(self.step_bins.size)

    def bin_of(self, x: float) -> int:
        j = int(np.floor(x / self.h))
        if not (0 <= j < self.n_bins):
            raise ValueError(f"x={x!r} outside the binned range")
        return j

    def occupation_totals(self) -> np.ndarray:
        """Total time spent in each bin."""
        return np.bincount(self.step_bins, minlength=self.n_bins) * self.dt

    def occupation_upto(self, t_index: int) -> np.ndarray:
        counts = np.bincount(self.step_bins[:t_index], minlength=self.n_bins)
        return counts * self.dt

    def ell_hat(self, t: float, x: float) -> float:
        """Estimated local time at level x up to time t."""
        t_index = min(int(np.floor(t / self.dt)), self.n_steps)
        j = self.bin_of(x)
        occ = np.count_nonzero(self.step_bins[:t_index] == j) * self.dt
        return occ / (2.0 * self.h)

    def ell_hat_total(self, x: float) -> float:
        j = self.bin_of(x)
        occ = np.count_nonzero(self.step_bins == j) * self.dt
        return occ / (2.0 * self.h)

    def ell_hat_profile(self) -> np.ndarray:
        """Vector of l_hat at the final time for every bin."""
        return self.occupation_totals() / (2.0 * self.h)

    def accounting_check(self) -> float:
        """|sum_j O(inf, j) - min(t_end, zeta)|; exact attribution gives 0.

        The counted time span is zeta for absorbed paths and the full grid
        span for truncated ones; integer bin counts make the identity exact.
        """
        counted = int(np.bincount(self.step_bins, minlength=self.n_bins).sum())
        return abs(counted - self.n_steps) * self.dt

    def to_csv(self, path_or_file, stride: int = 1) -> None:
        """Cumulative l_hat rows (t_i) by bin-midpoint columns."""
        mids = (np.arange(self.n_bins) + 0.5) * self.h
        counts = np.zeros(self.n_bins)
        rows = []
        times = []
        for s in range(0, self.n_steps, stride):
            np.add.at(counts, self.step_bins[s : s + stride], 1.0)
            rows.append(counts * self.dt / (2.0 * self.h))
            times.append((s + stride) * self.dt)
        data = np.column_stack([np.asarray(times), np.asarray(rows)])
        header = "t," + ",".join(f"{m:.10g}" for m in mids)
        np.savetxt(path_or_file, data, delimiter=",", header=header, comments="")


def occupation_field(
    p: SampledPath, h: float, x_max: Optional[float] = None
) -> LocalTimeField:
    """Bin the path's occupation by step midpoints.

    Each step dt is attributed to the bin of (e(t_k) + e(t_{k+1}))/2; steps
    after absorption are not counted. ``x_max`` must cover the path maximum
    (defaults to it); the binned range is extended to a whole number of bins.
    """
    if h <= 0:
        raise ValueError("bin width must be positive")
    pmax = p.maximum
    if x_max is None:
        x_max = pmax
    if x_max < pmax:
        raise ValueError(f"x_max={x_max!r} is below the path maximum {pmax!r}")
    n_steps = p.zeta_index if p.zeta_index is not None else p.n_steps
    v = p.values[: n_steps + 1]
    mids = 0.5 * (v[:-1] + v[1:])
    n_bins = max(1, int(np.ceil(x_max / h - 1e-12)))
    bins = np.floor(mids / h).astype(np.int32)
    np.clip(bins, 0, n_bins - 1, out=bins)
    return LocalTimeField(
        h=float(h),
        dt=p.dt,
        n_bins=n_bins,
        step_bins=bins,
        step_mid=mids,
        zeta_index=p.zeta_index,
    )


def total_local_time(field: LocalTimeField, x: float) -> float:
    """l_hat at the final time index, at level x."""
    return field.ell_hat_total(x)
