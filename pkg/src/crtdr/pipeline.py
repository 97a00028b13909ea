"""End-to-end dataset analysis: load, validate, expand, fit, estimate,
and assemble the machine-readable report document.

The report is a plain dict ready for JSON serialization; re-running
with the same config produces an identical document except the
"created" timestamp.
"""

from __future__ import annotations

import warnings
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import AnalysisConfig, ConfigError
from .crossfit import crossfit_nuisances
from .data import (expand_missing_indicators, load_csv, validate_dataset)
from .estimator import dr_cluster_average, ipw_estimate, unadjusted_estimate
from .nuisance import (NonconvergenceError, SeparationError, build_design,
                       fit_logistic, fit_parametric_nuisances)
from .sensitivity import (BiasComponents, estimate_bias_components,
                          sensitivity_grid, tipping_point_search)
from .variance import (assemble_dr_system, build_dr_system, build_ipw_system,
                       build_mean_system, ci_tdist, crossfit_variance,
                       effect_variance_sandwich)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _logistic_block(fit, design, extra=None):
    block = {
        "converged": True,
        "iterations": int(fit.n_iter),
        "coefficients": {n: float(b) for n, b in zip(fit.names, fit.coef)},
        "dropped_columns": [list(d) for d in design.dropped],
    }
    if extra:
        block.update(extra)
    return block


def components_dict(comps: BiasComponents) -> dict:
    return {
        "nonparticipation_fraction": comps.nonparticipation_fraction,
        "nonparticipation_optimistic": comps.nonparticipation_optimistic,
        "missing_frac_arm1": comps.missing_frac_arm1,
        "missing_frac_arm0": comps.missing_frac_arm0,
        "missing_frac_pooled": comps.missing_frac_pooled,
        "provenance": dict(comps.provenance),
    }


def components_from_dict(doc: dict) -> BiasComponents:
    return BiasComponents(
        nonparticipation_fraction=float(doc["nonparticipation_fraction"]),
        nonparticipation_optimistic=float(doc.get("nonparticipation_optimistic", 0.0)),
        missing_frac_arm1=float(doc["missing_frac_arm1"]),
        missing_frac_arm0=float(doc["missing_frac_arm0"]),
        missing_frac_pooled=float(doc.get(
            "missing_frac_pooled",
            0.5 * (float(doc["missing_frac_arm1"]) + float(doc["missing_frac_arm0"])))),
        provenance=dict(doc.get("provenance", {})),
    )


def _df_covariate_count(cfg: AnalysisConfig, expanded) -> int:
    if cfg.df_covariates is not None:
        return cfg.df_covariates
    if cfg.estimator == "unadjusted":
        return 0
    return build_design(expanded, include_treatment=False).X.shape[1] - 1


def sensitivity_block(estimate: float, se: float, df, comps: BiasComponents,
                      settings, level: float) -> dict:
    """Tipping points and the literal grid for the report document."""
    tipping = []
    for dd in settings.delta_grid:
        g = tipping_point_search(estimate, se, df, comps, delta_diff=dd,
                                 level=level)
        tipping.append({
            "delta": float(dd),
            "gamma_tipping": None if np.isinf(g) else float(g),
            "finite": bool(np.isfinite(g)),
            "note": "" if np.isfinite(g) else "no finite tipping point in gamma",
        })
    grid = sensitivity_grid(estimate, se, df, comps,
                            delta_grid=settings.delta_grid,
                            gamma1_grid=settings.gamma1_grid,
                            gamma0_grid=settings.gamma0_grid, level=level)
    return {
        "delta_grid": list(settings.delta_grid),
        "gamma1_grid": list(settings.gamma1_grid),
        "gamma0_grid": list(settings.gamma0_grid),
        "level": level,
        "components": components_dict(comps),
        "tipping": tipping,
        "grid": grid,
    }


def analyze_dataset(cfg: AnalysisConfig, dataset=None) -> dict:
    """Run the configured analysis and return the report document.

    `dataset` bypasses the CSV load (used by tests and the simulation
    smoke paths); otherwise cfg.data is read with cfg.schema.
    """
    if dataset is None:
        schema = dict(cfg.schema or {})
        schema["randomization_probability"] = cfg.pi
        schema["full_enrollment"] = not cfg.sampling
        ds = load_csv(cfg.data, schema)
    else:
        ds = replace(dataset, pi=cfg.pi, full_enrollment=not cfg.sampling)

    validation = validate_dataset(ds)
    expanded = expand_missing_indicators(
        ds, imputation_constant=cfg.imputation_constant)
    df_cov = _df_covariate_count(cfg, expanded)

    collected: list = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res, system, var_raw, nuisance = _run_configured_estimator(
            cfg, ds, expanded)
        if system is not None:
            var_raw, _ = effect_variance_sandwich(system, res.gradient)
        iv = ci_tdist(res.effect, var_raw, ds.m, df_cov, cfg.level)
    collected.extend(str(w.message) for w in caught)

    comps = estimate_bias_components(
        ds, cfg.sensitivity.population_cap if cfg.sensitivity else None)
    sens = None
    if cfg.sensitivity is not None:
        if cfg.scale != "difference":
            raise ConfigError(
                "sensitivity analysis is defined on the difference scale; "
                f"got scale '{cfg.scale}'")
        sens = sensitivity_block(res.effect, iv.se, iv.df, comps,
                                 cfg.sensitivity, cfg.level)

    doc = {
        "package": "crtdr",
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": cfg.seed,
        "seed_generated": cfg.seed_generated,
        "config": {
            "data": cfg.data,
            "estimator": cfg.estimator,
            "scale": cfg.scale,
            "pi": cfg.pi,
            "sampling": cfg.sampling,
            "propensity_floor": cfg.propensity_floor,
            "level": cfg.level,
            "eta_family": cfg.eta_family,
            "model_treatment": cfg.use_treatment_model,
            "ipw_pooling": cfg.ipw_pooling,
            "folds": cfg.folds,
            "weights": cfg.weights,
            "imputation_constant": cfg.imputation_constant,
        },
        "dataset": {
            "m": validation.m,
            "n_individuals": validation.n_individuals,
            "arm_sizes": {str(k): int(v) for k, v in validation.arm_sizes.items()},
            "outcome_missing_rate": validation.outcome_missing_rate,
            "covariate_missing_rates": validation.covariate_missing_rates,
            "population_missing_count": validation.population_missing_count,
            "enrolled_min": int(ds.m_enrolled.min()),
            "enrolled_max": int(ds.m_enrolled.max()),
            "bias_components": components_dict(comps),
            "warnings": list(validation.warnings),
        },
        "estimate": {
            "estimator": cfg.estimator,
            "scale": cfg.scale,
            "mu1": res.mu1,
            "mu0": res.mu0,
            "effect": res.effect,
            "variance_raw": iv.variance_raw,
            "correction": iv.correction,
            "se": iv.se,
            "df": iv.df,
            "df_covariates": df_cov,
            "level": iv.level,
            "lower": iv.lower,
            "upper": iv.upper,
        },
        "nuisance": nuisance,
        "sensitivity": sens,
        "warnings": collected,
    }
    return _jsonable(doc)


def _run_configured_estimator(cfg: AnalysisConfig, ds, expanded):
    """Dispatch on the estimator tag.

    Returns (result, system or None, raw variance when system is None,
    nuisance diagnostics block).
    """
    obs = ds.outcome_observed
    if cfg.estimator == "unadjusted":
        res = unadjusted_estimate(ds, cfg.scale)
        return res, build_mean_system(res.percluster, res.mu1, res.mu0), None, None

    if cfg.estimator == "ipw":
        design = build_design(expanded, include_treatment=True)
        fit = fit_logistic(design.X, obs.astype(float), names=design.names)
        kappa = np.clip(fit.predict(design.X), cfg.propensity_floor, 1.0)
        res = ipw_estimate(ds, kappa, cfg.scale, pooling=cfg.ipw_pooling)
        nuisance = {
            "kind": "ipw",
            "pooling": cfg.ipw_pooling,
            "kappa": _logistic_block(fit, design, {
                "range": [float(kappa.min()), float(kappa.max())]}),
        }
        if cfg.ipw_pooling == "individual":
            system = build_ipw_system(ds, fit, design, res, cfg.propensity_floor)
        else:
            z = np.zeros(ds.n_individuals)
            system = assemble_dr_system(
                ds, (res.mu1, res.mu0), weights=cfg.weights,
                propensity_floor=cfg.propensity_floor,
                kappa_part=(design, fit.coef), eta_fixed=(z, z))
        return res, system, None, nuisance

    if cfg.estimator == "dr-pm":
        try:
            fit = fit_parametric_nuisances(
                expanded, obs, propensity_floor=cfg.propensity_floor,
                eta_family=cfg.eta_family,
                model_treatment=cfg.use_treatment_model)
        except (SeparationError, NonconvergenceError) as err:
            if not cfg.use_treatment_model:
                raise
            warnings.warn("treatment model fell back to the known "
                          f"randomization probability: {err}")
            fit = fit_parametric_nuisances(
                expanded, obs, propensity_floor=cfg.propensity_floor,
                eta_family=cfg.eta_family, model_treatment=False)
        res = dr_cluster_average(ds, fit.predictions, weights=cfg.weights,
                                 scale=cfg.scale)
        kappa = fit.predictions.kappa
        nuisance = {
            "kind": "parametric",
            "kappa": _logistic_block(fit.kappa_fit, fit.kappa_design, {
                "range": [float(kappa.min()), float(kappa.max())]}),
            "eta": {
                "converged": True,
                "family": fit.eta_fit.family,
                "iterations": int(fit.eta_fit.n_iter),
                "rho": float(fit.eta_fit.rho),
                "phi": float(fit.eta_fit.phi),
                "coefficients": {n: float(b) for n, b in
                                 zip(fit.eta_fit.names, fit.eta_fit.coef)},
                "dropped_columns": [list(d) for d in fit.eta_design.dropped],
            },
            "treatment": (_logistic_block(fit.treatment_fit, fit.treatment_design)
                          if fit.treatment_fit is not None else None),
        }
        return res, build_dr_system(ds, fit, res, weights=cfg.weights), None, nuisance

    if cfg.estimator == "dr-ml":
        cf = crossfit_nuisances(
            expanded, obs, kappa_spec=cfg.ensemble, eta_spec=cfg.ensemble,
            n_folds=cfg.folds, seed=cfg.seed,
            propensity_floor=cfg.propensity_floor,
            include_cluster_summaries=not cfg.sampling)
        res = dr_cluster_average(ds, cf.predictions, weights=cfg.weights,
                                 scale=cfg.scale)
        var_raw, _ = crossfit_variance(res.percluster,
                                       cf.predictions.fold_ids, res.gradient)
        fold_ids = cf.predictions.fold_ids
        kappa = cf.predictions.kappa
        nuisance = {
            "kind": "cross-fit",
            "folds": int(cf.n_folds),
            "fold_sizes": [int(np.sum(fold_ids == k)) for k in range(cf.n_folds)],
            "kappa_range": [float(kappa.min()), float(kappa.max())],
            "ensemble": {
                "learners": [[spec.kind, dict(spec.params)]
                             for spec in cfg.ensemble.learners],
                "kappa_weights": [[float(w) for w in ws] for ws in cf.kappa_weights],
                "eta_weights": [[float(w) for w in ws] for ws in cf.eta_weights],
            },
        }
        return res, None, var_raw, nuisance

    raise ConfigError(f"unknown estimator '{cfg.estimator}'")
