"""Marginal hours responses to welfare participation.

A structural microsimulator of static labor supply with a welfare program
(:mod:`welfare_mte.structural`) generates data and exact ground truth; a
two-stage local-IV estimator (:mod:`welfare_mte.estimation`) with bootstrap
inference and diagnostics (:mod:`welfare_mte.inference`) recovers the
marginal response curve; :mod:`welfare_mte.counterfactual` evaluates
reform scenarios.
"""

__version__ = "0.1.0"

from .curves import MTECurve
from .dataset import Dataset, read_dataset, write_dataset
from .design import instrument_index
from .errors import (
    BootstrapAbortError,
    ConfigurationError,
    ConvergenceError,
    DegenerateOutcomeError,
    InvalidInputError,
    OutOfSupportError,
    ParseError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
    WelfareMTEError,
)
from .estimation import (
    PipelineConfig,
    fit_pipeline,
    homogeneous_iv_fit,
    impute_wages,
    mte_by_outcome,
    mte_eval,
    second_stage_fit,
    wage_fit,
)
from .kernels import BACKEND
from .probit import FirstStageModel, probit_fit, probit_predict
from .spline import SplineBasis, natural_spline_basis
from .structural import (
    Agent,
    BudgetConstraint,
    FixedCost,
    PopulationSpec,
    Preferences,
    delta,
    indifference_locus,
    optimal_hours,
    participate,
    population_moments,
    regime_utility,
    simulate_population,
    true_mte_curve,
    utility_gain,
)

__all__ = [
    "Agent", "BACKEND", "BootstrapAbortError", "BudgetConstraint", "ConfigurationError", "ConvergenceError",
    "Dataset", "DegenerateOutcomeError", "FirstStageModel", "FixedCost", "InvalidInputError", "MTECurve",
    "OutOfSupportError", "ParseError", "PipelineConfig", "PopulationSpec", "Preferences", "RankDeficiencyError",
    "SchemaError", "SeparationError", "SplineBasis", "WelfareMTEError", "delta", "fit_pipeline",
    "homogeneous_iv_fit", "impute_wages", "indifference_locus", "instrument_index", "mte_by_outcome", "mte_eval",
    "natural_spline_basis", "optimal_hours", "participate", "population_moments", "probit_fit", "probit_predict",
    "read_dataset", "regime_utility", "second_stage_fit", "simulate_population", "true_mte_curve",
    "utility_gain", "wage_fit", "write_dataset",
]
