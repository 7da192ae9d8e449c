"""Joint longitudinal-survival modelling for tumour burden and overall survival."""

__version__ = "0.1.0"

from .data import (
    CohortDataset,
    DataError,
    RmstEstimate,
    StepCurve,
    join_cohort,
    kaplan_meier,
    load_longitudinal,
    load_survival,
    observed_rmst,
)
from .model import (
    AssociationParams,
    JointModelSpec,
    LongitudinalParams,
    ModelError,
    NumericalError,
    ParameterState,
    PriorSpec,
    SurvivalParams,
    WeibullFit,
    association_hr,
    cumulative_hazard,
    fit_weibull_mle,
    joint_hazard,
    log_posterior,
    log_prior,
    make_state,
)
from .sampler import (
    Chain,
    DiagnosticsReport,
    DicResult,
    DrawDecoder,
    McmcConfig,
    PosteriorSamples,
    SamplerError,
    diagnostics_report,
    dic,
    initialize_chain,
    mcse_ratio,
    mwg_step,
    rhat,
    run_chains,
    split_rhat,
)
from .extrapolate import (
    ExtrapolationResult,
    conditional_death_times,
    default_grid,
    predict_cohort,
    summarize,
    weibull_extrapolation,
)
from .simulate import (
    SimDesign,
    SimulatedCohort,
    scenario,
    scenario_catalog,
    simulate_cohort,
)
from .estimators import (
    JointSurvivalModel,
    KaplanMeierEstimator,
    WeibullSurvivalModel,
)

__all__ = [
    "AssociationParams",
    "Chain",
    "CohortDataset",
    "DataError",
    "DiagnosticsReport",
    "DicResult",
    "DrawDecoder",
    "ExtrapolationResult",
    "JointModelSpec",
    "JointSurvivalModel",
    "KaplanMeierEstimator",
    "LongitudinalParams",
    "McmcConfig",
    "ModelError",
    "NumericalError",
    "ParameterState",
    "PosteriorSamples",
    "PriorSpec",
    "RmstEstimate",
    "SamplerError",
    "SimDesign",
    "SimulatedCohort",
    "StepCurve",
    "SurvivalParams",
    "WeibullFit",
    "WeibullSurvivalModel",
    "association_hr",
    "conditional_death_times",
    "cumulative_hazard",
    "default_grid",
    "diagnostics_report",
    "dic",
    "fit_weibull_mle",
    "initialize_chain",
    "join_cohort",
    "joint_hazard",
    "kaplan_meier",
    "load_longitudinal",
    "load_survival",
    "log_posterior",
    "log_prior",
    "make_state",
    "mcse_ratio",
    "mwg_step",
    "observed_rmst",
    "predict_cohort",
    "rhat",
    "run_chains",
    "scenario",
    "scenario_catalog",
    "simulate_cohort",
    "split_rhat",
    "summarize",
    "weibull_extrapolation",
    "__version__",
]
