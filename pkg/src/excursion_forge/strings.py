"""Strictly increasing strings on (0, infinity) and their speed measures.

A string is represented by the density of the absolutely continuous part of
its measure plus a finite list of atoms, with an optional closed-form value
function. The module classifies strings into the nested boundary classes

    M0 (value bounded near 0)  subset of
    M1 (integral of m(x)^2 near 0 finite)  subset of
    ML (integral of x log log(1/x) dm near 0 finite)  subset of
    M  (integral of x dm near 0 finite),

evaluates the associated tightness integrals for families m_lambda, builds the
canonical power-law strings and the rescaled family used in the limit
experiments, and fits the global envelope |m_lambda(x)| <= C x^(eps-1).

All integrals are computed by interval-adaptive midpoint quadrature (relative
tolerance 1e-8, hard cap 2**20 panels); midpoint rules never evaluate the
singular endpoint at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

QUAD_RTOL = 1e-8
QUAD_MAX_PANELS = 1 << 20

# Truncation sequence and trend threshold for divergence detection: an
# integral is declared divergent when the last three truncation refinements
# each grow the estimate by more than TREND_THRESHOLD of its current value.
TRUNCATION_SEQUENCE = tuple(10.0 ** -k for k in range(2, 9))
TREND_THRESHOLD = 0.05

LOG_BARRIER = math.exp(-1.0)  # log log(1/x) defined and positive below this

_CLASS_ORDER = ("M0", "M1", "ML", "M")


class QuadratureError(RuntimeError):
    """Adaptive quadrature hit the panel cap; carries the partial estimate."""

    def __init__(self, message: str, partial: float):
        super().__init__(f"{message} (partial estimate {partial!r})")
        self.partial = partial


def adaptive_midpoint(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    rtol: float = QUAD_RTOL,
    max_panels: int = QUAD_MAX_PANELS,
) -> float:
    """Integrate ``f`` over (a, b) by interval-adaptive midpoint refinement.

    Each interval's halving error must fit a budget proportional to its width;
    intervals that miss the budget are bisected, so panels concentrate near
    integrable singularities. The endpoints are never evaluated.
    """
    if not (a < b):
        if a == b:
            return 0.0
        raise ValueError("need a < b")
    lo = np.array([a], dtype=float)
    hi = np.array([b], dtype=float)
    est = (hi - lo) * np.asarray(f((lo + hi) / 2.0), dtype=float)
    accepted = 0.0
    panels = 1
    width = b - a
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        left = (mid - lo) * np.asarray(f(0.5 * (lo + mid)), dtype=float)
        right = (hi - mid) * np.asarray(f(0.5 * (mid + hi)), dtype=float)
        refined = left + right
        err = np.abs(refined - est)
        scale = max(abs(accepted + float(refined.sum())), 1e-300)
        budget = rtol * scale * (hi - lo) / width
        # width-proportional global budget OR local relative convergence;
        # for one-signed integrands the total error stays within ~rtol * I
        ok = (err <= budget) | (err <= rtol * np.abs(refined)) | (err == 0.0)
        accepted += float(refined[ok].sum())
        if ok.all():
            return accepted
        keep = ~ok
        panels += int(keep.sum())
        if panels > max_panels:
            raise QuadratureError(
                "quadrature did not converge within the panel cap",
                accepted + float(refined[keep].sum()),
            )
        lo, hi = (
            np.concatenate([lo[keep], mid[keep]]),
            np.concatenate([mid[keep], hi[keep]]),
        )
        est = np.concatenate([left[keep], right[keep]])
    raise QuadratureError("quadrature recursion too deep", accepted)


@dataclass(eq=False)
class StringModel:
    """A strictly increasing string m on (0, inf): density + atoms + value.

    ``density`` is the absolutely continuous part of dm (mass per unit
    length); ``atoms`` are (location, mass) pairs with positive, distinct
    locations. ``value_at`` is the closed form of m when known; otherwise
    values are reconstructed by quadrature from ``anchor = (x0, m0)``.
    Instances are immutable by convention and safe to share across workers.
    """

    density: Callable
    atoms: tuple = ()
    value_at: Optional[Callable] = None
    anchor: Optional[tuple] = None
    label: str = ""
    m_infinity: Optional[float] = None
    # density == coef * x**exponent, when known; lets simulation kernels
    # evaluate the density without a Python callback
    power_form: Optional[tuple] = None
    # density == c0 / (1 + c1 x), when known (same purpose)
    log_form: Optional[tuple] = None
    alpha: Optional[float] = None
    spec_form: Optional[str] = None
    _class_cache: Optional["ClassReport"] = field(
        default=None, repr=False, compare=False
    )

    def rho(self, x):
        return self.density(x)

    def value(self, x: float) -> float:
        """m(x); closed form if available, anchored quadrature otherwise."""
        if self.value_at is not None:
            return float(self.value_at(x))
        if self.anchor is None:
            raise ValueError(f"string {self.label!r} has no value_at and no anchor")
        x0, m0 = self.anchor
        if x == x0:
            base = m0
        elif x > x0:
            base = m0 + adaptive_midpoint(self.density, x0, x)
        else:
            base = m0 - adaptive_midpoint(self.density, x, x0)
        for loc, mass in self.atoms:
            if x0 < loc <= x:
                base += mass
            elif x < loc <= x0:
                base -= mass
        return float(base)

    def atom_mass(self, a: float, b: float) -> float:
        """Total atom mass in (a, b]."""
        return float(sum(c for loc, c in self.atoms if a < loc <= b))


def _validate_atoms(atoms) -> tuple:
    out = tuple((float(x), float(c)) for x, c in atoms)
    locs = [x for x, _ in out]
    if any(x <= 0 for x in locs):
        raise ValueError("atom locations must be strictly positive")
    if len(set(locs)) != len(locs):
        raise ValueError("duplicate atom locations")
    if any(c <= 0 for _, c in out):
        raise ValueError("atom masses must be strictly positive")
    return tuple(sorted(out))


def make_power_string(alpha: float) -> StringModel:
    """Canonical power-law string with density x -> x**(1/alpha - 2) / alpha.

    Value function: (1-alpha)^{-1} x^{1/alpha-1} for alpha < 1, log x for
    alpha = 1, -(alpha-1)^{-1} x^{1/alpha-1} for alpha > 1.
    """
    alpha = float(alpha)
    if not (alpha > 0):
        raise ValueError("alpha must be positive")
    p = 1.0 / alpha - 2.0
    coef = 1.0 / alpha

    def density(x, _c=coef, _p=p):
        return _c * np.asarray(x, dtype=float) ** _p

    if alpha == 1.0:
        value_at = lambda x: np.log(x)  # noqa: E731
        m_inf = None
    else:
        q = 1.0 / alpha - 1.0
        c_v = 1.0 / (1.0 - alpha) if alpha < 1.0 else -1.0 / (alpha - 1.0)
        value_at = lambda x, _c=c_v, _q=q: _c * np.asarray(x, dtype=float) ** _q  # noqa: E731
        m_inf = 0.0 if alpha > 1.0 else None
    return StringModel(
        density=density,
        value_at=value_at,
        label=f"power(alpha={alpha:g})",
        m_infinity=m_inf,
        power_form=(coef, p),
        alpha=alpha,
        spec_form=f"kind=power alpha={alpha!r}",
    )


def make_log1p_string(c0: float = 1.0, c1: float = 1.0) -> StringModel:
    """String with density c0/(1 + c1 x), value (c0/c1) log(1 + c1 x).

    The unit case is the canonical slowly-drifting test string m(x) = log(1+x),
    whose rescalings converge to the alpha = 1 power string.
    """
    if c0 <= 0 or c1 <= 0:
        raise ValueError("c0 and c1 must be positive")

    def density(x, _a=c0, _b=c1):
        return _a / (1.0 + _b * np.asarray(x, dtype=float))

    def value_at(x, _a=c0, _b=c1):
        return (_a / _b) * np.log1p(_b * np.asarray(x, dtype=float))

    return StringModel(
        density=density,
        value_at=value_at,
        label=f"log1p(c0={c0:g},c1={c1:g})",
        log_form=(float(c0), float(c1)),
        spec_form=f"kind=table density={c0!r}/(1+{c1!r}*x) anchor=1e-300:0",
    )


def make_table_string(
    density: Callable,
    atoms: Sequence = (),
    anchor: Optional[tuple] = None,
    value_at: Optional[Callable] = None,
    label: str = "table",
    m_infinity: Optional[float] = None,
    power_form: Optional[tuple] = None,
    strict: bool = True,
    spec_form: Optional[str] = None,
) -> StringModel:
    """String from a tabulated or closed-form density plus atoms.

    ``anchor = (x0, m0)`` fixes the value function when no closed form is
    supplied. ``strict=False`` skips the strict-increase probe (used only for
    degenerate test fixtures such as atom-only strings).
    """
    atoms = _validate_atoms(atoms)
    probe = np.geomspace(1e-6, 1e3, 64)
    vals = np.asarray(density(probe), dtype=float)
    if np.any(vals < 0):
        bad = probe[np.asarray(vals) < 0][0]
        raise ValueError(f"density negative at x={bad!r}")
    if strict and not np.all(vals > 0) and not atoms:
        raise ValueError(
            "density vanishes on the probe grid and there are no atoms; "
            "the string would not be strictly increasing"
        )
    if anchor is None and value_at is None:
        raise ValueError("need an anchor or a closed-form value_at")
    m = StringModel(
        density=density,
        atoms=atoms,
        value_at=value_at,
        anchor=anchor,
        label=label,
        m_infinity=m_infinity,
        power_form=power_form,
        spec_form=spec_form,
    )
    if value_at is not None:
        _check_value_consistency(m)
    return m


def _check_value_consistency(m: StringModel, rtol: float = 1e-6) -> None:
    # value_at must reproduce dm((a,b]) on a few sampled intervals
    for a, b in ((0.2, 0.5), (0.5, 1.5), (1.5, 4.0)):
        direct = float(m.value_at(b)) - float(m.value_at(a))
        built = adaptive_midpoint(m.density, a, b) + m.atom_mass(a, b)
        if abs(direct - built) > rtol * (abs(direct) + abs(built) + 1e-12):
            raise ValueError(
                f"value_at inconsistent with density/atoms on ({a}, {b}]: "
                f"{direct!r} vs {built!r}"
            )


def add_strings(m1: StringModel, m2: StringModel, label: str = "") -> StringModel:
    """String whose measure is the sum dm1 + dm2."""
    d1, d2 = m1.density, m2.density

    def density(x):
        return d1(x) + d2(x)

    merged: dict = {}
    for loc, c in list(m1.atoms) + list(m2.atoms):
        merged[loc] = merged.get(loc, 0.0) + c
    value_at = None
    if m1.value_at is not None and m2.value_at is not None:
        v1, v2 = m1.value_at, m2.value_at
        value_at = lambda x: v1(x) + v2(x)  # noqa: E731
    anchor = None
    if value_at is None:
        if m1.anchor and m2.anchor and m1.anchor[0] == m2.anchor[0]:
            anchor = (m1.anchor[0], m1.anchor[1] + m2.anchor[1])
        else:
            raise ValueError("cannot anchor the sum: incompatible value data")
    power_form = None
    if (
        m1.power_form is not None
        and m2.power_form is not None
        and m1.power_form[1] == m2.power_form[1]
    ):
        power_form = (m1.power_form[0] + m2.power_form[0], m1.power_form[1])
    m_inf = None
    if m1.m_infinity is not None and m2.m_infinity is not None:
        m_inf = m1.m_infinity + m2.m_infinity
    return StringModel(
        density=density,
        atoms=tuple(sorted(merged.items())),
        value_at=value_at,
        anchor=anchor,
        label=label or f"({m1.label})+({m2.label})",
        m_infinity=m_inf,
        power_form=power_form,
    )


def measure_of(m: StringModel, interval: tuple) -> float:
    """dm((a, b]): quadrature of the density plus atom masses inside.

    Uses the closed-form value function when present (then atoms are already
    included in the values).
    """
    a, b = float(interval[0]), float(interval[1])
    if not (0.0 < a < b):
        raise ValueError("need 0 < a < b")
    if m.value_at is not None:
        return float(m.value_at(b)) - float(m.value_at(a))
    return adaptive_midpoint(m.density, a, b) + m.atom_mass(a, b)


def class_integral(
    m: StringModel, kind: str, delta: float, x_min: float
) -> float:
    """Truncated class integral over (x_min, delta].

    kind "M": integral of x dm; "ML": integral of x log log(1/x) dm;
    "M1": integral of m(x)^2 dx.
    """
    if kind not in ("M", "ML", "M1"):
        raise ValueError(f"unknown kind {kind!r}")
    if not (0.0 < x_min < delta):
        raise ValueError("need 0 < x_min < delta")
    if kind == "ML" and delta >= LOG_BARRIER:
        raise ValueError("kind ML requires delta < 1/e")
    rho = m.density
    if kind == "M":
        total = adaptive_midpoint(lambda x: x * rho(x), x_min, delta)
        total += sum(x * c for x, c in m.atoms if x_min < x <= delta)
    elif kind == "ML":
        total = adaptive_midpoint(
            lambda x: x * np.log(np.log(1.0 / x)) * rho(x), x_min, delta
        )
        total += sum(
            x * math.log(math.log(1.0 / x)) * c
            for x, c in m.atoms
            if x_min < x <= delta
        )
    else:
        if m.value_at is not None:
            val = m.value_at
            total = adaptive_midpoint(
                lambda x: np.asarray(val(x), dtype=float) ** 2, x_min, delta
            )
        else:
            # anchored value function: precompute a cumulative table once so
            # the squared-value quadrature does not nest adaptive quadratures
            knots = np.geomspace(x_min * 0.5, delta * 1.02, 512)
            segs = [
                adaptive_midpoint(m.density, a, b, rtol=1e-10)
                for a, b in zip(knots[:-1], knots[1:])
            ]
            base = m.value(float(knots[0]))
            cum = base + np.concatenate([[0.0], np.cumsum(segs)])
            for loc, mass in m.atoms:
                cum += mass * (knots >= loc)

            def val_interp(x):
                return np.interp(np.asarray(x, dtype=float), knots, cum)

            total = adaptive_midpoint(
                lambda x: val_interp(x) ** 2, x_min, delta
            )
    return float(total)


@dataclass
class ClassReport:
    """Three-valued class flags plus the truncated-integral evidence.

    Flags are True / False / None (undetermined). ``integral_estimates`` maps
    each class name to its truncation sequence, estimates, and trend slope
    (mean growth ratio over the last three refinements).
    """

    in_M0: Optional[bool]
    in_M1: Optional[bool]
    in_ML: Optional[bool]
    in_M: Optional[bool]
    integral_estimates: dict

    def flags(self) -> dict:
        return {
            "M0": self.in_M0,
            "M1": self.in_M1,
            "ML": self.in_ML,
            "M": self.in_M,
        }


def _trend(values: Sequence[float]):
    """(verdict, slope): divergent / convergent / undetermined by growth rule."""
    v = list(values)
    ratios = []
    for i in (-3, -2, -1):
        cur = v[i]
        prev = v[i - 1]
        ratios.append((cur - prev) / cur if cur > 0 else 0.0)
    slope = sum(ratios) / len(ratios)
    if all(r > TREND_THRESHOLD for r in ratios):
        return "divergent", slope
    if all(r <= TREND_THRESHOLD for r in ratios):
        return "convergent", slope
    return "undetermined", slope


def classify(
    m: StringModel,
    delta: float = 0.1,
    truncations: Sequence[float] = TRUNCATION_SEQUENCE,
) -> ClassReport:
    """Classify a string by truncated-integral divergence trends.

    Each class integral is evaluated at the decreasing truncation sequence;
    divergence is declared when the last three refinements each grow the
    estimate by more than 5 percent. Membership in M0 is boundedness of
    |m(x)| along the same sequence. Results are cached on the model.
    """
    if m._class_cache is not None:
        return m._class_cache
    xs = [x for x in truncations if x < delta]
    estimates: dict = {}
    flags: dict = {}
    for kind in ("M", "ML", "M1"):
        vals = [class_integral(m, kind, delta, x) for x in xs]
        verdict, slope = _trend(vals)
        estimates[kind] = {
            "truncations": list(xs),
            "estimates": vals,
            "trend_slope": slope,
        }
        flags[kind] = {"divergent": False, "convergent": True, "undetermined": None}[
            verdict
        ]
    bounds = [abs(m.value(x)) for x in xs]
    verdict, slope = _trend(bounds)
    estimates["M0"] = {
        "truncations": list(xs),
        "estimates": bounds,
        "trend_slope": slope,
    }
    flags["M0"] = {"divergent": False, "convergent": True, "undetermined": None}[
        verdict
    ]
    # enforce M0 => M1 => ML => M: never report an inner class True with an
    # outer class False; demote contradictory pairs to undetermined
    ordered = [flags[k] for k in _CLASS_ORDER]
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            if ordered[i] is True and ordered[j] is False:
                ordered[i] = None
                ordered[j] = None
    report = ClassReport(
        in_M0=ordered[0],
        in_M1=ordered[1],
        in_ML=ordered[2],
        in_M=ordered[3],
        integral_estimates=estimates,
    )
    m._class_cache = report
    return report


@dataclass
class TightnessReport:
    """Grid of tightness integrals I(delta, lambda) and a trend verdict."""

    family_id: str
    kind: str
    deltas: list
    lambdas: list
    table: list  # table[i][j] = I(deltas[i], lambdas[j])
    sup_by_delta: list  # sup over the largest lambdas, per delta
    verdict: str  # "tight" | "not-tight" | "undetermined"
    note: str


# verdict rule: tight when the sup over the top half of the lambda grid is
# nonincreasing in delta (5% slack) and the smallest-delta sup has dropped to
# no more than half the largest-delta sup
TIGHT_DECAY_FRACTION = 0.5


def tightness_report(
    family: Callable[[float], StringModel],
    kind: str,
    deltas: Sequence[float],
    lambdas: Sequence[float],
    family_id: str = "family",
    x_min_factor: float = 1e-9,
) -> TightnessReport:
    """Tabulate I(delta, lambda) for the requested tightness integrand.

    The integral over (0, delta] is truncated at delta * x_min_factor, which
    is a documented desk-scale stand-in for the singular lower endpoint.
    """
    deltas = [float(d) for d in deltas]
    lambdas = [float(v) for v in lambdas]
    if any(b >= a for a, b in zip(deltas, deltas[1:])) and len(deltas) > 1:
        if not all(b < a for a, b in zip(deltas, deltas[1:])):
            raise ValueError("deltas must be decreasing")
    if not all(b > a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambdas must be increasing")
    models = []
    for lam in lambdas:
        mod = family(lam)
        if not isinstance(mod, StringModel):
            raise ValueError(f"family({lam!r}) did not return a StringModel")
        models.append(mod)
    table = []
    for d in deltas:
        row = [class_integral(mod, kind, d, d * x_min_factor) for mod in models]
        if any(v < -1e-12 for v in row):
            raise ValueError(f"negative tightness integral at delta={d}")
        table.append(row)
    top = max(1, len(lambdas) // 2)
    sup_by_delta = [max(row[-top:]) for row in table]
    nonincreasing = all(
        b <= a * (1.0 + TREND_THRESHOLD)
        for a, b in zip(sup_by_delta, sup_by_delta[1:])
    )
    decayed = sup_by_delta[-1] <= TIGHT_DECAY_FRACTION * sup_by_delta[0] + 1e-12
    if nonincreasing and decayed:
        verdict = "tight"
    elif not nonincreasing:
        verdict = "not-tight" if sup_by_delta[-1] > sup_by_delta[0] else "undetermined"
    else:
        verdict = "not-tight"
    note = (
        "limsup over lambda approximated by the largest "
        f"{top} lambda(s); integrals truncated at delta*{x_min_factor:g}; "
        "verdict extrapolates the decreasing-delta trend"
    )
    return TightnessReport(
        family_id=family_id,
        kind=kind,
        deltas=deltas,
        lambdas=lambdas,
        table=table,
        sup_by_delta=sup_by_delta,
        verdict=verdict,
        note=note,
    )


def resolve_m_infinity(m: StringModel, cutoff: float = 1e6) -> float:
    """m(infinity), supplied or estimated as value(cutoff) with a tail check."""
    if m.m_infinity is not None:
        return float(m.m_infinity)
    v1 = m.value(cutoff)
    v2 = m.value(10.0 * cutoff)
    if abs(v2 - v1) > 0.01 * (abs(v1) + 1.0):
        raise ValueError(
            f"m(infinity) diverges numerically: value({cutoff:g})={v1!r}, "
            f"value({10 * cutoff:g})={v2!r}"
        )
    return float(v2)


def rescale(
    m: StringModel,
    lam: float,
    alpha: float,
    K: Optional[Callable[[float], float]] = None,
    m_inf: Optional[float] = None,
) -> StringModel:
    """The rescaled string m_lambda with dm_lambda(x) = dm(lam x) / norm.

    norm = lam**(1/alpha - 1) * K(lam). The value function follows the three
    regimes: m(lam x)/norm for alpha < 1, (m(lam x) - m(lam))/K(lam) for
    alpha = 1, (m(lam x) - m(inf))/norm for alpha > 1 (m(inf) must be finite,
    supplied via ``m_inf`` or the model, or estimated at a large cutoff).
    """
    lam = float(lam)
    alpha = float(alpha)
    if lam <= 0 or alpha <= 0:
        raise ValueError("lam and alpha must be positive")
    k_lam = 1.0 if K is None else float(K(lam))
    if not (k_lam > 0):
        raise ValueError("K(lam) must be positive")
    norm = lam ** (1.0 / alpha - 1.0) * k_lam
    rho = m.density

    def density(x, _lam=lam, _norm=norm):
        return _lam * rho(_lam * np.asarray(x, dtype=float)) / _norm

    value_at = None
    if m.value_at is not None or m.anchor is not None:
        if alpha < 1.0:
            shift = 0.0
        elif alpha == 1.0:
            shift = m.value(lam)
        else:
            shift = m_inf if m_inf is not None else resolve_m_infinity(m)
        denom = k_lam if alpha == 1.0 else norm
        base_value = m.value_at

        if base_value is not None:
            def value_fn(x, _s=shift, _d=denom, _lam=lam):
                return (np.asarray(base_value(_lam * np.asarray(x, dtype=float)), dtype=float) - _s) / _d
        else:
            def value_fn(x, _s=shift, _d=denom, _lam=lam):
                return (m.value(_lam * float(x)) - _s) / _d
        value_at = value_fn
    atoms = tuple((loc / lam, c / norm) for loc, c in m.atoms)
    power_form = None
    if m.power_form is not None:
        c0, p = m.power_form
        power_form = (c0 * lam ** (1.0 + p) / norm, p)
    log_form = None
    if m.log_form is not None:
        c0, c1 = m.log_form
        log_form = (c0 * lam / norm, c1 * lam)
    m_inf_out = None
    if alpha > 1.0:
        m_inf_out = 0.0
    return StringModel(
        density=density,
        atoms=atoms,
        value_at=value_at,
        anchor=None if value_at is not None else m.anchor,
        label=f"{m.label}|rescaled(lam={lam:g})",
        m_infinity=m_inf_out,
        power_form=power_form,
        log_form=log_form,
        alpha=m.alpha,
    )


def slow_variation_ratio_check(
    K: Callable[[float], float],
    xs: Sequence[float] = (2.0, 5.0, 10.0),
    lambdas: Sequence[float] = (1e2, 1e3, 1e4, 1e5, 1e6, 1e7),
    tol: float = 0.1,
) -> tuple:
    """Heuristic grid check of K(lam x)/K(lam) -> 1; returns (ok, worst)."""
    worst = 0.0
    lam = max(lambdas)
    for x in xs:
        ratio = K(lam * x) / K(lam)
        worst = max(worst, abs(ratio - 1.0))
    return worst <= tol, worst


def fit_global_bound(
    family: Callable[[float], StringModel],
    lambda_0: float,
    eps_grid: Sequence[float],
    lambdas: Optional[Sequence[float]] = None,
    x_depths: Sequence[int] = (4, 6, 8),
    points_per_decade: int = 16,
) -> Optional[tuple]:
    """Largest eps in (0,1) with sup |m_lambda(x)| x^(1-eps) finite-trending.

    The sup is sampled over geometric x grids on (0, 1] refined toward 0 and
    over a lambda grid above lambda_0. Finite-trending means the refinements
    stop growing (5 percent rule) in both the x depth and the lambda
    direction. Returns (C, eps) or None on failure.
    """
    if lambdas is None:
        lo = max(2.0 * lambda_0, 10.0)
        lambdas = list(np.geomspace(lo, lo * 1e5, 7))
    models = [family(float(v)) for v in lambdas]
    for eps in sorted((e for e in eps_grid if 0.0 < e < 1.0), reverse=True):
        sup_by_depth = []
        sup_by_lambda_last = None
        for depth in x_depths:
            xs = np.geomspace(10.0 ** -depth, 1.0, depth * points_per_decade)
            sups = []
            for mod in models:
                vals = np.array([abs(mod.value(float(x))) for x in xs])
                sups.append(float(np.max(vals * xs ** (1.0 - eps))))
            sup_by_depth.append(max(sups))
            sup_by_lambda_last = sups
        grew_in_x = any(
            b > a * (1.0 + TREND_THRESHOLD)
            for a, b in zip(sup_by_depth, sup_by_depth[1:])
        )
        half = max(1, len(sup_by_lambda_last) // 2)
        top = sup_by_lambda_last[-half:]
        grew_in_lambda = top[-1] > (1.0 + TREND_THRESHOLD) * min(top)
        if not grew_in_x and not grew_in_lambda:
            return (sup_by_depth[-1], float(eps))
    return None


# ---------------------------------------------------------------------------
# line-based serialization:  kind=power alpha=0.5
#                            kind=table density=<expr|file> atoms=x:c,... anchor=x0:m0

_SAFE_NAMES = {
    name: getattr(np, name)
    for name in (
        "log",
        "log1p",
        "exp",
        "sqrt",
        "abs",
        "sin",
        "cos",
        "tanh",
        "minimum",
        "maximum",
        "where",
    )
}
_SAFE_NAMES["pi"] = math.pi
_SAFE_NAMES["e"] = math.e


def density_from_expression(expr: str) -> Callable:
    """Density callable from an expression in x (restricted numpy namespace)."""
    code = compile(expr, "<density>", "eval")
    for name in code.co_names:
        if name not in _SAFE_NAMES and name != "x":
            raise ValueError(f"name {name!r} not allowed in density expressions")

    def density(x, _code=code):
        return eval(_code, {"__builtins__": {}}, dict(_SAFE_NAMES, x=np.asarray(x, dtype=float)))

    return density


_POWER_EXPR = __import__("re").compile(
    r"^(?:(?P<coef>[0-9.eE+-]+)\*)?x\*\*(?P<exp>\(?[0-9.eE+-]+\)?)$"
)


def _power_form_of_expression(expr: str) -> Optional[tuple]:
    """(coef, exponent) for expressions of the shape [c*]x**p, else None."""
    m = _POWER_EXPR.match(expr.replace(" ", ""))
    if not m:
        return None
    try:
        coef = 1.0 if m.group("coef") is None else float(m.group("coef"))
        exp = float(m.group("exp").strip("()"))
    except ValueError:
        return None
    return (coef, exp)


def load_density_csv(path: str) -> Callable:
    """Tabulated density from a two-column CSV (x, rho(x)), x strictly increasing."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    xs, ys = data[:, 0], data[:, 1]
    if not np.all(np.diff(xs) > 0):
        raise ValueError(f"{path}: x column must be strictly increasing")
    if np.any(ys < 0):
        raise ValueError(f"{path}: negative density value")

    def density(x):
        return np.interp(np.asarray(x, dtype=float), xs, ys)

    return density


def format_string_spec(m: StringModel) -> str:
    if m.spec_form is None:
        raise ValueError(f"string {m.label!r} has no serialized form")
    return m.spec_form


def parse_string_spec(text: str) -> StringModel:
    """Parse the line-based string form; see module External Interfaces."""
    fields = {}
    for tok in text.split():
        if "=" not in tok:
            raise ValueError(f"malformed token {tok!r} in string spec")
        k, v = tok.split("=", 1)
        if k in fields:
            raise ValueError(f"duplicate key {k!r} in string spec")
        fields[k] = v
    kind = fields.pop("kind", None)
    if kind == "power":
        alpha = float(fields.pop("alpha"))
        if fields:
            raise ValueError(f"unknown keys for power string: {sorted(fields)}")
        return make_power_string(alpha)
    if kind == "table":
        dens_spec = fields.pop("density", None)
        if dens_spec is None:
            raise ValueError("table string needs density=<expr|file>")
        power_form = None
        if dens_spec.endswith(".csv"):
            density = load_density_csv(dens_spec)
        else:
            density = density_from_expression(dens_spec)
            power_form = _power_form_of_expression(dens_spec)
        atoms = []
        if "atoms" in fields:
            for pair in fields.pop("atoms").split(","):
                loc, mass = pair.split(":")
                atoms.append((float(loc), float(mass)))
        anchor = None
        if "anchor" in fields:
            x0, m0 = fields.pop("anchor").split(":")
            anchor = (float(x0), float(m0))
        if fields:
            raise ValueError(f"unknown keys for table string: {sorted(fields)}")
        canon = f"kind=table density={dens_spec}"
        if atoms:
            canon += " atoms=" + ",".join(f"{x:g}:{c:g}" for x, c in atoms)
        if anchor is not None:
            canon += f" anchor={anchor[0]:g}:{anchor[1]:g}"
        return make_table_string(
            density,
            atoms=atoms,
            anchor=anchor,
            label=f"table({dens_spec})",
            power_form=power_form,
            spec_form=canon,
        )
    raise ValueError(f"unknown string kind {kind!r}")
