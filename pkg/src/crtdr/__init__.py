"""Doubly robust estimation of cluster-average treatment effects in
cluster-randomized trials with missing outcomes, missing covariates,
within-cluster sampling, and unknown cluster population sizes.

Public surface: dataset loading and missingness expansion (data),
parametric and cross-fit nuisance models (nuisance, learners,
crossfit), the estimators (estimator), stacked sandwich and cross-fit
variances (variance), tipping-point sensitivity analysis (sensitivity),
the Monte Carlo harness (simulation), and the command-line front end
(cli).
"""

__version__ = "0.1.0"

from .data import (DataValidationError, ExpandedDesign, TrialDataset,
                   expand_missing_indicators, load_csv, to_csv,
                   validate_dataset)
from .estimator import (DomainError, EstimateResult, dr_cluster_average,
                        effect_scale, individual_average_reweight,
                        ipw_estimate, optimal_exchangeable_weights,
                        scaled_weights, unadjusted_estimate)
from .learners import EnsembleSpec, LearnerSpec, default_ensemble
from .nuisance import (NonconvergenceError, NuisancePredictions,
                       RankDeficiencyError, SeparationError,
                       fit_gee_exchangeable, fit_logistic,
                       fit_parametric_nuisances)
from .crossfit import crossfit_nuisances, partition_clusters
from .variance import (NumericalError, ci_tdist, crossfit_variance,
                       sandwich_covariance, t_quantile)
from .sensitivity import (BiasComponents, bias_S, estimate_bias_components,
                          sensitivity_grid, tipping_point_search)
from .simulation import (EstimatorConfig, ScenarioConfig, generate_trial,
                         preset, run_replications, sensitivity_replication,
                         summarize_metrics)

__all__ = [
    "__version__",
    "BiasComponents", "DataValidationError", "DomainError", "EnsembleSpec",
    "EstimateResult", "EstimatorConfig", "ExpandedDesign", "LearnerSpec",
    "NonconvergenceError", "NuisancePredictions", "NumericalError",
    "RankDeficiencyError", "ScenarioConfig", "SeparationError",
    "TrialDataset", "bias_S", "ci_tdist", "crossfit_nuisances",
    "crossfit_variance", "default_ensemble", "dr_cluster_average",
    "effect_scale", "estimate_bias_components", "expand_missing_indicators",
    "fit_gee_exchangeable", "fit_logistic", "fit_parametric_nuisances",
    "generate_trial", "individual_average_reweight", "ipw_estimate",
    "load_csv", "optimal_exchangeable_weights", "partition_clusters",
    "preset", "run_replications", "sandwich_covariance", "scaled_weights",
    "sensitivity_grid", "sensitivity_replication", "summarize_metrics",
    "t_quantile", "tipping_point_search", "to_csv", "unadjusted_estimate",
    "validate_dataset",
]
