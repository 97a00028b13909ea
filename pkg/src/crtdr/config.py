"""JSON configuration parsing for the command-line front end.

Two document kinds: an analysis config (dataset path, estimator choice,
nuisance settings, output options) and a scenario config (simulation
design, replicate count, estimator list). Unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .learners import EnsembleSpec, LearnerSpec, default_ensemble
from .simulation import EstimatorConfig, ScenarioConfig, preset

ESTIMATOR_TAGS = ("unadjusted", "ipw", "dr-pm", "dr-ml")
SCALES = ("difference", "ratio", "odds-ratio")


class ConfigError(ValueError):
    """Raised when a configuration document is invalid."""


def _require_keys(doc: dict, allowed, context: str):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} keys: {', '.join(unknown)}")


def _fresh_seed() -> int:
    # entropy-based; recorded in the report so the run stays reproducible
    return int(np.random.SeedSequence().entropy % (2**32))


def parse_ensemble(doc) -> EnsembleSpec:
    if doc is None:
        return default_ensemble()
    _require_keys(doc, ("learners", "validation_fraction"), "ensemble")
    learners = []
    for entry in doc.get("learners", ()):
        entry = dict(entry)
        kind = entry.pop("kind", None)
        if kind not in ("intercept", "glm", "ridge", "forest", "knn"):
            raise ConfigError(f"unknown learner kind '{kind}'")
        learners.append(LearnerSpec.make(kind, **entry))
    if not learners:
        raise ConfigError("ensemble requires at least one learner")
    frac = float(doc.get("validation_fraction", 0.2))
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {frac}")
    return EnsembleSpec(learners=tuple(learners), validation_fraction=frac)


@dataclass
class SensitivitySettings:
    delta_grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    gamma1_grid: tuple = tuple(np.round(np.arange(0.0, 5.01, 0.25), 10))
    gamma0_grid: tuple = (0.0,)
    population_cap: float | None = None


def parse_sensitivity_settings(doc) -> SensitivitySettings:
    if doc is None:
        return SensitivitySettings()
    _require_keys(doc, ("delta_grid", "gamma1_grid", "gamma0_grid",
                        "population_cap"), "sensitivity")
    out = SensitivitySettings()
    if "delta_grid" in doc:
        grid = tuple(float(v) for v in doc["delta_grid"])
        if not grid or any(v < 0 for v in grid):
            raise ConfigError("delta grid must be nonempty and nonnegative")
        out.delta_grid = grid
    if "gamma1_grid" in doc:
        out.gamma1_grid = tuple(float(v) for v in doc["gamma1_grid"])
    if "gamma0_grid" in doc:
        out.gamma0_grid = tuple(float(v) for v in doc["gamma0_grid"])
    if doc.get("population_cap") is not None:
        out.population_cap = float(doc["population_cap"])
    return out


@dataclass
class AnalysisConfig:
    data: str
    schema: dict | None = None
    estimator: str = "dr-pm"
    scale: str = "difference"
    pi: float = 0.5
    sampling: bool = False
    propensity_floor: float = 0.01
    level: float = 0.95
    seed: int = 0
    seed_generated: bool = False
    eta_family: str = "gaussian"
    model_treatment: bool | None = None
    ipw_pooling: str = "individual"
    folds: int | None = None
    ensemble: EnsembleSpec = field(default_factory=default_ensemble)
    df_covariates: int | None = None
    weights: str = "constant"
    imputation_constant: float = 0.0
    sensitivity: SensitivitySettings | None = None

    @property
    def use_treatment_model(self) -> bool:
        if self.model_treatment is not None:
            return self.model_treatment
        return self.estimator == "dr-pm"


_ANALYSIS_KEYS = (
    "data", "schema", "estimator", "scale", "pi", "sampling",
    "propensity_floor", "level", "seed", "eta_family", "model_treatment",
    "ipw_pooling", "folds", "ensemble", "df_covariates", "weights",
    "imputation_constant", "sensitivity",
)


def parse_analysis_config(doc: dict, base_dir: str = ".") -> AnalysisConfig:
    _require_keys(doc, _ANALYSIS_KEYS, "analysis config")
    if "data" not in doc:
        raise ConfigError("analysis config requires a 'data' path")
    data = doc["data"]
    if not os.path.isabs(data):
        data = os.path.normpath(os.path.join(base_dir, data))
    estimator = doc.get("estimator", "dr-pm")
    if estimator not in ESTIMATOR_TAGS:
        raise ConfigError(f"unknown estimator '{estimator}'; "
                          f"choose one of {', '.join(ESTIMATOR_TAGS)}")
    scale = doc.get("scale", "difference")
    if scale not in SCALES:
        raise ConfigError(f"unknown effect scale '{scale}'")
    level = float(doc.get("level", 0.95))
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must lie in (0, 1), got {level}")
    floor = float(doc.get("propensity_floor", 0.01))
    if not 0.0 < floor < 1.0:
        raise ConfigError(f"propensity floor must lie in (0, 1), got {floor}")
    pi = float(doc.get("pi", 0.5))
    if not 0.0 < pi < 1.0:
        raise ConfigError(f"randomization probability must lie in (0, 1), got {pi}")
    eta_family = doc.get("eta_family", "gaussian")
    if eta_family not in ("gaussian", "binomial-logit"):
        raise ConfigError(f"unknown outcome family '{eta_family}'")
    pooling = doc.get("ipw_pooling", "individual")
    if pooling not in ("individual", "cluster"):
        raise ConfigError(f"unknown ipw pooling '{pooling}'")
    weights = doc.get("weights", "constant")
    if weights not in ("constant", "exchangeable"):
        raise ConfigError(f"unknown weight scheme '{weights}'")
    folds = doc.get("folds")
    if folds is not None:
        folds = int(folds)
        if folds < 2:
            raise ConfigError("cross-fitting requires at least 2 folds")
    df_cov = doc.get("df_covariates")
    seed = doc.get("seed")
    generated = seed is None
    seed = _fresh_seed() if generated else int(seed)
    sens = (parse_sensitivity_settings(doc["sensitivity"])
            if doc.get("sensitivity") is not None else None)
    return AnalysisConfig(
        data=data,
        schema=doc.get("schema"),
        estimator=estimator,
        scale=scale,
        pi=pi,
        sampling=bool(doc.get("sampling", False)),
        propensity_floor=floor,
        level=level,
        seed=seed,
        seed_generated=generated,
        eta_family=eta_family,
        model_treatment=doc.get("model_treatment"),
        ipw_pooling=pooling,
        folds=folds,
        ensemble=parse_ensemble(doc.get("ensemble")),
        df_covariates=None if df_cov is None else int(df_cov),
        weights=weights,
        imputation_constant=float(doc.get("imputation_constant", 0.0)),
        sensitivity=sens,
    )


@dataclass
class ScenarioDocument:
    scenario: ScenarioConfig
    replicates: int
    seed: int
    seed_generated: bool
    level: float
    estimators: tuple
    sensitivity: dict | None    # {"delta_grid": ..., "estimators": ...}
    include_not_implemented_marker: bool = True


def parse_estimator_entry(entry) -> EstimatorConfig:
    if isinstance(entry, str):
        return preset(entry)
    entry = dict(entry)
    _require_keys(entry, ("name", "kind", "eta", "kappa", "model_treatment",
                          "pooling", "compute_se", "folds", "df_covariates",
                          "propensity_floor", "ensemble"), "estimator entry")
    kind = entry.get("kind")
    if kind not in ("unadjusted", "ipw", "dr-parametric", "dr-ml"):
        raise ConfigError(f"unknown estimator kind '{kind}'")
    name = entry.get("name", kind)
    ensemble = parse_ensemble(entry["ensemble"]) if entry.get("ensemble") else None
    return EstimatorConfig(
        name=name,
        kind=kind,
        eta=entry.get("eta", "gee"),
        kappa=entry.get("kappa", "logistic"),
        model_treatment=bool(entry.get("model_treatment", False)),
        pooling=entry.get("pooling", "individual"),
        compute_se=bool(entry.get("compute_se", True)),
        n_folds=entry.get("folds"),
        kappa_ensemble=ensemble,
        eta_ensemble=ensemble,
        df_covariates=entry.get("df_covariates"),
        propensity_floor=float(entry.get("propensity_floor", 0.01)),
    )


_SCENARIO_KEYS = ("m", "p_m", "sampling", "replicates", "seed", "level",
                  "estimators", "sensitivity")


def parse_scenario_config(doc: dict) -> ScenarioDocument:
    _require_keys(doc, _SCENARIO_KEYS, "scenario config")
    for key in ("m", "p_m", "replicates"):
        if key not in doc:
            raise ConfigError(f"scenario config requires '{key}'")
    try:
        scenario = ScenarioConfig(m=int(doc["m"]), p_m=float(doc["p_m"]),
                                  sampling=bool(doc.get("sampling", False)))
    except ValueError as err:
        raise ConfigError(str(err)) from None
    replicates = int(doc["replicates"])
    if replicates < 1:
        raise ConfigError("replicate count must be positive")
    level = float(doc.get("level", 0.95))
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must lie in (0, 1), got {level}")
    seed = doc.get("seed")
    generated = seed is None
    seed = _fresh_seed() if generated else int(seed)
    entries = doc.get("estimators", ["unadjusted", "ipw", "dr-pm", "dr-ml"])
    estimators = tuple(parse_estimator_entry(e) for e in entries)
    names = [cfg.name for cfg in estimators]
    if len(set(names)) != len(names):
        raise ConfigError("estimator names must be unique")
    sens = doc.get("sensitivity")
    if sens is not None:
        _require_keys(sens, ("delta_grid", "estimators"), "scenario sensitivity")
        sens = {
            "delta_grid": tuple(float(v) for v in
                                sens.get("delta_grid", (0, 1, 2, 3, 4))),
            "estimators": tuple(parse_estimator_entry(e) for e in
                                sens.get("estimators", ["dr-pm", "dr-ml"])),
        }
    return ScenarioDocument(scenario=scenario, replicates=replicates,
                            seed=seed, seed_generated=generated, level=level,
                            estimators=estimators, sensitivity=sens)


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
