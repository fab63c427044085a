"""Batch front end: config parsing, experiment dispatch, report artifacts.

Config files use a line-based ``key = value`` grammar with ``[section]``
headers; command-line flags override file values. Every stochastic subcommand
requires an explicit ``--seed`` (no wall-clock seeding). Artifacts embed the
config hash and master seed, so re-running from the embedded config
reproduces them byte for byte.

Exit codes: 0 pass, 2 statistical-verdict fail, 3 input error, 4 numerical
error (quadrature/bisection), 5 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import experiments as xp
from . import strings as xs
from .rng import SeedSpec
from .samplers import (
    sample_bes3,
    sample_bes3_first_passage,
    sample_bm_absorbed,
    sample_excursion_given_max,
)
from .timechange import sample_Pm, sample_Qm, sample_excursion_nm

EXIT_PASS = 0
EXIT_STAT_FAIL = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

EXPERIMENT_IDS = (
    "classify",
    "tightness",
    "sample",
    "timechange",
    "williams",
    "dichotomy",
    "converge",
    "limit",
    "report",
)

_KNOWN_KEYS = {
    "experiment", "string", "string2", "family", "kind", "alpha", "a", "x0",
    "dt", "new_dt", "h", "n", "n_full", "lambdas", "deltas", "x_mins",
    "seed", "workers", "out", "m_cap", "x_levels", "t_max", "preset",
    "compare", "x0_mode", "ks_threshold", "source", "level",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run description; defaults are echoed into the report."""

    experiment: str
    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def canonical_text(self) -> str:
        lines = ["[run]", f"experiment = {self.experiment}"]
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


_LIST_KEYS = {"lambdas", "deltas", "x_mins", "x_levels"}
_FLOAT_KEYS = {
    "alpha", "a", "x0", "dt", "new_dt", "h", "m_cap", "t_max",
    "ks_threshold", "level",
}
_INT_KEYS = {"n", "n_full", "seed", "workers"}


def _parse_value(key: str, raw: str, lineno: int):
    raw = raw.strip()
    try:
        if key in _LIST_KEYS:
            vals = [float(tok) for tok in raw.split(",") if tok.strip()]
            if not vals:
                raise ValueError("empty list")
            return vals
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r} ({exc})")
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse the documented ``key = value`` / ``[section]`` grammar."""
    values: dict = {}
    experiment: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section header")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values or (key == "experiment" and experiment is not None):
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        val = _parse_value(key, raw, lineno)
        if key == "experiment":
            experiment = str(val).strip()
        else:
            values[key] = val
    if experiment is None:
        raise ConfigError("missing required key 'experiment'")
    if experiment not in EXPERIMENT_IDS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    _validate_values(values)
    return RunConfig(experiment=experiment, values=values)


def _validate_values(values: dict) -> None:
    for key, v in values.items():
        if key in _LIST_KEYS:
            if any(x <= 0 for x in v):
                raise ConfigError(f"{key} entries must be positive")
        elif key in _FLOAT_KEYS and key != "ks_threshold":
            if isinstance(v, float) and v <= 0:
                raise ConfigError(f"{key} must be positive")
        elif key in _INT_KEYS and key != "seed":
            if v <= 0:
                raise ConfigError(f"{key} must be positive")


def serialize_config(cfg: RunConfig) -> str:
    return cfg.canonical_text()


def _string_from_spec(spec: str) -> xs.StringModel:
    return xs.parse_string_spec(spec)


# ---------------------------------------------------------------------------
# presets: one per acceptance criterion, so the acceptance suite is a
# sequence of CLI invocations

PRESETS = {
    "classification-table": {
        "experiment": "classify",
        "alpha": 0.0,  # sentinel: run the whole table
    },
    "identity-timechange": {
        "experiment": "timechange",
        "n": 100, "a": 0.5, "dt": 1e-4, "h": 0.005, "m_cap": 50.0,
    },
    "williams": {
        "experiment": "williams",
        "a": 1.0, "n": 100000, "x_levels": [0.5, 1.0], "dt": 5e-5, "h": 0.02,
    },
    "converge-exact": {
        "experiment": "converge", "family": "exact-linear",
        "lambdas": [10.0, 100.0, 1000.0, 10000.0],
        "a": 0.5, "n": 100, "dt": 1e-4, "h": 0.005, "m_cap": 50.0,
    },
    "converge-a2": {
        "experiment": "converge", "family": "log-a2",
        "lambdas": [10.0, 100.0, 1000.0, 10000.0],
        "a": 0.1, "n": 400, "dt": 1e-4, "h": 0.005, "m_cap": 50.0,
    },
    "dichotomy": {
        "experiment": "dichotomy", "string": "kind=table density=x**-2.0 anchor=1:-1",
        "x_mins": [1e-2, 1e-3, 1e-4], "n": 1000, "dt": 1e-3, "h": 0.005,
    },
    "dichotomy-stable": {
        "experiment": "dichotomy", "string": "kind=power alpha=3",
        "x_mins": [1e-5, 1e-6, 1e-7], "n": 1000, "dt": 1e-3, "h": 0.005,
    },
    "qm-formula": {
        "experiment": "limit", "source": "qm-formula",
        "x0": 0.5, "alpha": 3.0, "n": 10000, "m_cap": 50.0,
    },
    "bm-meander": {
        "experiment": "limit", "source": "meander",
        "alpha": 0.5, "x0": 0.5, "lambdas": [10000.0],
        "n": 5000, "dt": 2.5e-3, "ks_threshold": 0.05,
    },
    "selfsimilar-a3": {
        "experiment": "limit", "source": "self-similar",
        "alpha": 3.0, "x0": 0.5, "lambdas": [100.0, 10000.0],
        "n": 10000, "dt": 1e-3, "m_cap": 50.0, "ks_threshold": 0.03,
    },
}


def _family_by_name(name: str):
    if name == "exact-linear":
        mh = xs.make_power_string(0.5)

        def fam(lam: float) -> xs.StringModel:
            lin = xs.make_table_string(
                lambda x, _l=lam: np.full_like(np.asarray(x, float), 1.0 / _l),
                value_at=lambda x, _l=lam: np.asarray(x, float) / _l,
                label=f"x/{lam:g}",
                power_form=(1.0 / lam, 0.0),
            )
            return xs.add_strings(mh, lin)

        return fam, mh
    if name == "log-a2":
        mlog = xs.make_log1p_string()
        return (lambda lam: xs.rescale(mlog, lam, 1.0)), xs.make_power_string(1.0)
    raise ConfigError(f"unknown family {name!r}")


def _need_seed(cfg: RunConfig) -> int:
    seed = cfg.get("seed")
    if seed is None:
        raise ConfigError(
            "--seed is mandatory for stochastic subcommands (no wall-clock seeding)"
        )
    return int(seed)


def _dispatch(cfg: RunConfig) -> xp.TestReport:
    ex = cfg.experiment
    workers = int(cfg.get("workers", 1))
    if ex == "classify":
        return _run_classify(cfg)
    if ex == "tightness":
        fam, _ = _family_by_name(cfg.get("family", "log-a2"))
        rep = xp.converse_tightness_check(
            fam,
            cfg.get("lambdas", [10.0, 100.0, 1000.0]),
            cfg.get("deltas", [0.25, 0.1, 0.03, 0.01, 3e-3]),
            family_id=cfg.get("family", "log-a2"),
        )
        return rep
    if ex == "timechange":
        return xp.identity_check_experiment(
            N=int(cfg.get("n", 100)),
            a=cfg.get("a", 0.5),
            dt=cfg.get("dt", 1e-4),
            h=cfg.get("h", 0.005),
            seed=_need_seed(cfg),
            m_cap=cfg.get("m_cap", 50.0),
            workers=workers,
        )
    if ex == "williams":
        return xp.williams_and_raylaw_suite(
            a=cfg.get("a", 1.0),
            x_levels=cfg.get("x_levels", [0.5, 1.0]),
            N=int(cfg.get("n", 100000)),
            dt=cfg.get("dt", 5e-5),
            h=cfg.get("h", 0.02),
            seed=_need_seed(cfg),
            n_pinned=2 * int(cfg.get("n", 100000)) if cfg.get("n") else 20000,
            workers=workers,
        )
    if ex == "dichotomy":
        m = _string_from_spec(cfg.get("string", "kind=table density=x**-2.0 anchor=1:-1"))
        return xp.dichotomy_experiment(
            m,
            cfg.get("x_mins", [1e-2, 1e-3, 1e-4]),
            N=int(cfg.get("n", 1000)),
            dt=cfg.get("dt", 1e-3),
            h=cfg.get("h", 0.005),
            seed=_need_seed(cfg),
            workers=workers,
        )
    if ex == "converge":
        fam, m_limit = _family_by_name(cfg.get("family", "log-a2"))
        return xp.convergence_experiment(
            fam,
            m_limit,
            cfg.get("lambdas", [10.0, 100.0, 1000.0, 10000.0]),
            a=cfg.get("a", 0.5),
            N=int(cfg.get("n", 100)),
            dt=cfg.get("dt", 1e-4),
            h=cfg.get("h", 0.005),
            seed=_need_seed(cfg),
            m_cap=cfg.get("m_cap", 50.0),
            workers=workers,
        )
    if ex == "limit":
        return _run_limit(cfg, workers)
    raise ConfigError(f"experiment {ex!r} is not dispatchable here")


def _run_classify(cfg: RunConfig) -> xp.TestReport:
    alphas = [0.3, 0.5, 0.9, 1.0, 1.5, 2.5, 3.0]
    if cfg.get("alpha") and cfg.get("alpha") > 0:
        alphas = [float(cfg.get("alpha"))]
    rows = {}
    ok = True
    for alpha in alphas:
        r = xs.classify(xs.make_power_string(alpha))
        rows[f"alpha={alpha:g}"] = r.flags()
        expected = {
            "M0": alpha < 1.0, "M1": alpha < 2.0, "ML": True, "M": True,
        }
        ok = ok and all(rows[f"alpha={alpha:g}"][k] is expected[k] for k in expected)
    if cfg.get("string"):
        m = _string_from_spec(cfg.get("string"))
        rows[m.label] = xs.classify(m).flags()
    else:
        minv = xs.make_table_string(
            lambda x: np.asarray(x, float) ** -2.0,
            value_at=lambda x: -1.0 / np.asarray(x, float),
            label="-1/x",
            power_form=(1.0, -2.0),
        )
        rows["-1/x"] = xs.classify(minv).flags()
        ok = ok and rows["-1/x"]["M"] is False
    return xp.TestReport(
        experiment_id="classify",
        params={"alphas": alphas},
        statistics={"table": {k: {c: v for c, v in row.items()} for k, row in rows.items()}},
        verdict="pass" if ok else "fail",
        seeds={},
    )


def _run_limit(cfg: RunConfig, workers: int) -> xp.TestReport:
    source = cfg.get("source", "meander")
    seed = _need_seed(cfg)
    if source == "qm-formula":
        m = xs.make_power_string(cfg.get("alpha", 3.0))
        return xp.qm_formula_experiment(
            x=cfg.get("x0", 0.5),
            m=m,
            N=int(cfg.get("n", 10000)),
            seed=seed,
            m_cap=cfg.get("m_cap", 50.0),
            workers=workers,
        )
    if source == "meander":
        n = int(cfg.get("n", 5000))
        oracle = xp.brownian_meander_walk_oracle(n, 10000, seed=seed)
        m = xs.make_power_string(cfg.get("alpha", 0.5))
        return xp.conditional_limit_experiment(
            m,
            cfg.get("alpha", 0.5),
            None,
            cfg.get("x0", 0.5),
            cfg.get("lambdas", [10000.0]),
            N=n,
            dt=cfg.get("dt", 2.5e-3),
            seed=seed,
            reference=oracle,
            compare="reference",
            x0_mode="source",
            ks_threshold=cfg.get("ks_threshold", 0.05),
            workers=workers,
        )
    if source == "self-similar":
        m = xs.make_power_string(cfg.get("alpha", 3.0))
        return xp.conditional_limit_experiment(
            m,
            cfg.get("alpha", 3.0),
            None,
            cfg.get("x0", 0.5),
            cfg.get("lambdas", [100.0, 10000.0]),
            N=int(cfg.get("n", 10000)),
            dt=cfg.get("dt", 1e-3),
            seed=seed,
            compare="self",
            x0_mode="rescaled",
            m_cap=cfg.get("m_cap", 50.0),
            ks_threshold=cfg.get("ks_threshold", 0.03),
            workers=workers,
        )
    raise ConfigError(f"unknown limit source {source!r}")


def _run_sample(cfg: RunConfig, outdir: str) -> int:
    kind = cfg.get("kind", "excursion")
    seed = SeedSpec(_need_seed(cfg), 0)
    dt = cfg.get("dt", 1e-3)
    if kind == "bm":
        p = sample_bm_absorbed(cfg.get("x0", 1.0), dt, cfg.get("t_max", 100.0), seed)
    elif kind == "bes3":
        p = sample_bes3(cfg.get("x0", 0.0), dt, cfg.get("t_max", 10.0), seed)
    elif kind == "bes3-fp":
        p = sample_bes3_first_passage(cfg.get("level", 1.0), dt, seed)
    elif kind == "excursion":
        p = sample_excursion_given_max(cfg.get("a", 0.5), dt, seed, m_cap=cfg.get("m_cap"))
    elif kind in ("qm", "pm", "excursion-nm"):
        m = _string_from_spec(cfg.get("string", "kind=power alpha=0.5"))
        new_dt = cfg.get("new_dt", dt)
        if kind == "qm":
            p = sample_Qm(cfg.get("x0", 1.0), m, dt, new_dt, seed)
        elif kind == "pm":
            p = sample_Pm(cfg.get("x0", 0.0), m, dt, new_dt, seed, t_max=cfg.get("t_max", 10.0))
        else:
            p = sample_excursion_nm(cfg.get("a", 0.5), m, dt, new_dt, seed, m_cap=cfg.get("m_cap"))
    else:
        raise ConfigError(f"unknown sample kind {kind!r}")
    path = os.path.join(outdir, "path.csv")
    p.to_csv(path)
    print(f"wrote {path} ({p.values.size} points, origin {p.origin_note})")
    return EXIT_PASS


def write_report(report: xp.TestReport, cfg: RunConfig, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    payload = report.to_dict()
    payload["provenance"] = dict(
        payload.get("provenance") or {},
        config_hash=cfg.hash(),
        version=xp.__version__,
    )
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        fh.write(blob)
    with open(os.path.join(outdir, "config.echo"), "w") as fh:
        fh.write(cfg.canonical_text())
    for name, arr in report.raw.items():
        arr = np.asarray(arr)
        np.savetxt(
            os.path.join(outdir, f"{name}.csv"),
            arr if arr.ndim > 1 else arr.reshape(-1, 1),
            delimiter=",",
            fmt="%.17g",
        )
    lines = [
        f"experiment: {report.experiment_id}",
        f"verdict:    {report.verdict}",
        f"config:     {cfg.hash()}",
        "statistics:",
        json.dumps(payload["statistics"], indent=2, sort_keys=True),
    ]
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines[:3]))


def _merge_flags(cfg_values: dict, args: argparse.Namespace) -> dict:
    merged = dict(cfg_values)
    for key in _KNOWN_KEYS - {"experiment", "preset", "out"}:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            if key in _LIST_KEYS and isinstance(flag, str):
                flag = [float(t) for t in flag.split(",")]
            merged[key] = flag
    return merged


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="excursion-forge",
        description=(
            "Monte Carlo verification of time-changed Brownian excursion laws. "
            "Subcommands run the registered experiments and write report.json, "
            "raw-sample CSVs, and a human-readable summary."
        ),
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENT_IDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (key = value grammar)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--a", type=float, default=None)
        p.add_argument("--x0", type=float, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--new_dt", type=float, default=None)
        p.add_argument("--h", type=float, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--n_full", type=int, default=None)
        p.add_argument("--m_cap", type=float, default=None)
        p.add_argument("--t_max", type=float, default=None)
        p.add_argument("--level", type=float, default=None)
        p.add_argument("--ks_threshold", type=float, default=None)
        p.add_argument("--lambdas", default=None)
        p.add_argument("--deltas", default=None)
        p.add_argument("--x_mins", default=None)
        p.add_argument("--x_levels", default=None)
        p.add_argument("--string", default=None)
        p.add_argument("--string2", default=None)
        p.add_argument("--family", default=None)
        p.add_argument("--kind", default=None)
        p.add_argument("--source", default=None)
        p.add_argument("--compare", default=None)
        p.add_argument("--x0_mode", default=None)
        if name == "report":
            p.add_argument("path", nargs="?", help="report.json to pretty-print")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if not args.path:
                raise ConfigError("report needs a path to a report.json")
            with open(args.path) as fh:
                payload = json.load(fh)
            print(json.dumps(payload, indent=2, sort_keys=True))
            return EXIT_PASS
        values: dict = {}
        if args.preset:
            values.update(PRESETS[args.preset])
            preset_exp = values.pop("experiment", args.command)
            if preset_exp != args.command:
                raise ConfigError(
                    f"preset {args.preset!r} belongs to subcommand {preset_exp!r}"
                )
        if args.config:
            with open(args.config) as fh:
                file_cfg = parse_config(fh.read())
            if file_cfg.experiment != args.command:
                raise ConfigError(
                    f"config is for {file_cfg.experiment!r}, not {args.command!r}"
                )
            values.update(file_cfg.values)
        values = _merge_flags(values, args)
        cfg = RunConfig(experiment=args.command, values=values)
        _validate_values(cfg.values)
        outdir = args.out or f"runs/{args.command}-{cfg.hash()}"
        if args.command == "sample":
            os.makedirs(outdir, exist_ok=True)
            return _run_sample(cfg, outdir)
        report = _dispatch(cfg)
        write_report(report, cfg, outdir)
        return EXIT_PASS if report.verdict in ("pass", "consistent", "tight") else EXIT_STAT_FAIL
    except ConfigError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (xs.QuadratureError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
