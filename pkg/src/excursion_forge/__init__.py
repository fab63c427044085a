"""Simulation library for time-changed Brownian excursion laws.

Strings (speed measures) on (0, inf) are classified by their boundary
behavior at the origin, time-change clocks A(t) = int l(t,x) dm(x) are built
from binned local-time fields of sampled paths, and theorem-level Monte Carlo
harnesses verify the finiteness dichotomy of the clock, the coupled
convergence of time-changed excursions under tightness of the rescaled
family, the maximum-decomposition and local-time laws, and the conditional
(meander) limits of rescaled, lifetime-conditioned diffusions.
"""

from .rng import SeedSpec, stream
from .samplers import (
    SampledPath,
    draw_excursion_max,
    rescale_path,
    sample_bes3,
    sample_bes3_first_passage,
    sample_bm_absorbed,
    sample_excursion_given_max,
    time_reverse,
)
from .localtime import LocalTimeField, occupation_field, total_local_time
from .strings import (
    ClassReport,
    QuadratureError,
    StringModel,
    TightnessReport,
    add_strings,
    class_integral,
    classify,
    fit_global_bound,
    make_log1p_string,
    make_power_string,
    make_table_string,
    measure_of,
    parse_string_spec,
    rescale,
    tightness_report,
)
from .timechange import (
    MonotoneFunctional,
    NotTimeChangeableError,
    additive_functional,
    inverse,
    sample_Pm,
    sample_Qm,
    sample_excursion_nm,
    time_change_path,
)
from .experiments import (
    EmpiricalSample,
    MeanderResult,
    TestReport,
    brownian_meander_walk_oracle,
    conditional_limit_experiment,
    convergence_experiment,
    converse_tightness_check,
    dichotomy_experiment,
    dkw_epsilon,
    identity_check_experiment,
    ks_one_sample,
    ks_two_sample,
    meander_sampler,
    qm_formula_experiment,
    u_of_lambda,
    williams_and_raylaw_suite,
)

__version__ = "0.1.0"

__all__ = [
    "SeedSpec",
    "stream",
    "SampledPath",
    "sample_bm_absorbed",
    "sample_bes3",
    "sample_bes3_first_passage",
    "sample_excursion_given_max",
    "draw_excursion_max",
    "time_reverse",
    "rescale_path",
    "LocalTimeField",
    "occupation_field",
    "total_local_time",
    "StringModel",
    "ClassReport",
    "TightnessReport",
    "QuadratureError",
    "make_power_string",
    "make_log1p_string",
    "make_table_string",
    "add_strings",
    "measure_of",
    "class_integral",
    "classify",
    "tightness_report",
    "rescale",
    "fit_global_bound",
    "parse_string_spec",
    "MonotoneFunctional",
    "NotTimeChangeableError",
    "additive_functional",
    "inverse",
    "time_change_path",
    "sample_Qm",
    "sample_Pm",
    "sample_excursion_nm",
    "EmpiricalSample",
    "TestReport",
    "MeanderResult",
    "ks_one_sample",
    "ks_two_sample",
    "dkw_epsilon",
    "u_of_lambda",
    "convergence_experiment",
    "converse_tightness_check",
    "dichotomy_experiment",
    "meander_sampler",
    "brownian_meander_walk_oracle",
    "conditional_limit_experiment",
    "williams_and_raylaw_suite",
    "identity_check_experiment",
    "qm_formula_experiment",
]
