"""Trial data containers, CSV loading, validation, and missingness expansion.

Data layout is columnar: cluster-level arrays of length m and
individual-level arrays of length n_total in cluster-major order,
with `cluster_index` mapping individuals to their cluster's position.
Missing values are NaN-coded everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd


class DataValidationError(ValueError):
    """Raised when a dataset violates a structural requirement."""


@dataclass
class TrialDataset:
    cluster_ids: np.ndarray        # (m,) labels as read from the file
    treatment: np.ndarray          # (m,) 0/1
    m_enrolled: np.ndarray         # (m,) int, rows present per cluster
    n_population: np.ndarray       # (m,) float, NaN where unknown
    cluster_index: np.ndarray      # (n,) int, individual -> cluster position
    outcome: np.ndarray            # (n,) float, NaN where missing
    x_names: tuple                 # individual covariate names
    x_values: np.ndarray           # (n, p) float, NaN where missing
    c_names: tuple                 # cluster covariate names
    c_values: np.ndarray           # (m, q) float, NaN where missing
    pi: float = 0.5                # randomization probability for arm 1
    full_enrollment: bool = True

    @property
    def m(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_individuals(self) -> int:
        return len(self.cluster_index)

    @property
    def outcome_observed(self) -> np.ndarray:
        return ~np.isnan(self.outcome)

    @property
    def population_observed(self) -> np.ndarray:
        return ~np.isnan(self.n_population)

    def with_outcome(self, outcome: np.ndarray) -> "TrialDataset":
        return replace(self, outcome=np.asarray(outcome, dtype=float))


@dataclass
class ValidationReport:
    m: int
    n_individuals: int
    arm_sizes: dict
    outcome_missing_rate: float
    covariate_missing_rates: dict
    population_missing_count: int
    warnings: list = field(default_factory=list)


@dataclass
class ExpandedDesign:
    """Missingness-expanded covariates.

    Individual-level columns: one (indicator, zero-filled value) pair per
    covariate in the order x covariates, cluster covariates, population
    size, then the enrolled count. Cluster-level columns hold the
    within-cluster means of the individual pairs plus the cluster-level
    pairs, for use as cluster summaries.
    """

    ds: TrialDataset
    column_names: tuple
    values: np.ndarray             # (n, d)
    cluster_column_names: tuple
    cluster_values: np.ndarray     # (m, dc)


DEFAULT_SCHEMA = {
    "cluster_id": "cluster_id",
    "treatment": "treatment",
    "outcome": "outcome",
    "enrolled_size": "M",
    "population_size": "N",
}


def _detect_covariates(columns, schema):
    reserved = {schema[k] for k in DEFAULT_SCHEMA}
    x_cols = schema.get("individual_covariates")
    c_cols = schema.get("cluster_covariates")
    if x_cols is None:
        x_cols = [c for c in columns if c.startswith("x_") and c not in reserved]
    if c_cols is None:
        c_cols = [c for c in columns if c.startswith("c_") and c not in reserved]
    return list(x_cols), list(c_cols)


def load_csv(path, schema=None) -> TrialDataset:
    """Read a long-format trial CSV (one row per enrolled individual).

    `schema` maps the logical fields (cluster_id, treatment, outcome,
    enrolled_size, population_size, individual_covariates,
    cluster_covariates, randomization_probability, full_enrollment) to
    file columns; omitted entries use the defaults. NA or empty cells
    are treated as missing.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = pd.read_csv(path)
    for key in ("cluster_id", "treatment", "outcome"):
        if schema[key] not in df.columns:
            raise DataValidationError(f"required column '{schema[key]}' not found in {path}")
    if schema["enrolled_size"] not in df.columns:
        raise DataValidationError(f"required column '{schema['enrolled_size']}' not found in {path}")

    x_cols, c_cols = _detect_covariates(df.columns, schema)
    ids, first_pos = np.unique(df[schema["cluster_id"]].to_numpy(), return_index=True)
    ids = ids[np.argsort(first_pos)]  # keep file order
    pos = {cid: k for k, cid in enumerate(ids)}
    cluster_index = np.array([pos[c] for c in df[schema["cluster_id"]]], dtype=np.int64)
    order = np.argsort(cluster_index, kind="stable")
    df = df.iloc[order].reset_index(drop=True)
    cluster_index = cluster_index[order]

    m = len(ids)
    treatment = np.zeros(m, dtype=np.int64)
    m_enrolled = np.zeros(m, dtype=np.int64)
    n_population = np.full(m, np.nan)
    c_values = np.full((m, len(c_cols)), np.nan)

    counts = np.bincount(cluster_index, minlength=m)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    for i in range(m):
        rows = df.iloc[starts[i]:starts[i] + counts[i]]
        cid = ids[i]
        trt = rows[schema["treatment"]].to_numpy()
        if np.unique(trt).size != 1:
            raise DataValidationError(f"treatment varies within cluster '{cid}'")
        if trt[0] not in (0, 1):
            raise DataValidationError(f"treatment for cluster '{cid}' must be 0 or 1, got {trt[0]}")
        treatment[i] = int(trt[0])
        msize = rows[schema["enrolled_size"]].to_numpy(dtype=float)
        if np.unique(msize).size != 1 or np.isnan(msize[0]):
            raise DataValidationError(f"enrolled size varies or is missing within cluster '{cid}'")
        m_enrolled[i] = int(msize[0])
        if schema["population_size"] in df.columns:
            nvals = rows[schema["population_size"]].to_numpy(dtype=float)
            uniq = np.unique(nvals[~np.isnan(nvals)])
            if uniq.size > 1:
                raise DataValidationError(f"population size varies within cluster '{cid}'")
            if np.isnan(nvals).any() and uniq.size == 1:
                raise DataValidationError(f"population size partially missing within cluster '{cid}'")
            if uniq.size == 1:
                n_population[i] = uniq[0]
        for k, col in enumerate(c_cols):
            vals = rows[col].to_numpy(dtype=float)
            uniq = np.unique(vals[~np.isnan(vals)])
            if uniq.size > 1:
                raise DataValidationError(f"cluster covariate '{col}' varies within cluster '{cid}'")
            if uniq.size == 1 and np.isnan(vals).any():
                raise DataValidationError(f"cluster covariate '{col}' partially missing within cluster '{cid}'")
            if uniq.size == 1:
                c_values[i, k] = uniq[0]

    outcome = df[schema["outcome"]].to_numpy(dtype=float)
    x_values = (df[x_cols].to_numpy(dtype=float) if x_cols
                else np.zeros((len(df), 0)))

    ds = TrialDataset(
        cluster_ids=ids,
        treatment=treatment,
        m_enrolled=m_enrolled,
        n_population=n_population,
        cluster_index=cluster_index,
        outcome=outcome,
        x_names=tuple(x_cols),
        x_values=x_values,
        c_names=tuple(c_cols),
        c_values=c_values,
        pi=float(schema.get("randomization_probability", 0.5)),
        full_enrollment=bool(schema.get("full_enrollment", True)),
    )
    return ds


def to_csv(ds: TrialDataset, path, schema=None) -> None:
    """Write a dataset back to long-format CSV (inverse of load_csv)."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    idx = ds.cluster_index
    cols = {
        schema["cluster_id"]: ds.cluster_ids[idx],
        schema["treatment"]: ds.treatment[idx],
        schema["outcome"]: ds.outcome,
        schema["enrolled_size"]: ds.m_enrolled[idx],
        schema["population_size"]: ds.n_population[idx],
    }
    for k, name in enumerate(ds.x_names):
        cols[name] = ds.x_values[:, k]
    for k, name in enumerate(ds.c_names):
        cols[name] = ds.c_values[idx, k]
    pd.DataFrame(cols).to_csv(path, index=False)


def load_schema_file(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def validate_dataset(ds: TrialDataset) -> ValidationReport:
    """Check structural invariants; raise DataValidationError on violation.

    Returns a summary report (arm sizes, missingness rates, warnings)
    when the dataset is usable.
    """
    if not 0 < ds.pi < 1:
        raise DataValidationError(f"randomization probability must lie in (0, 1), got {ds.pi}")
    counts = np.bincount(ds.cluster_index, minlength=ds.m)
    for i in range(ds.m):
        cid = ds.cluster_ids[i]
        if counts[i] != ds.m_enrolled[i]:
            raise DataValidationError(
                f"cluster '{cid}' declares {ds.m_enrolled[i]} enrolled individuals "
                f"but has {counts[i]} rows")
        if ds.m_enrolled[i] < 1:
            raise DataValidationError(f"cluster '{cid}' has no enrolled individuals")
        if ds.population_observed[i]:
            n_i = ds.n_population[i]
            if n_i < ds.m_enrolled[i]:
                raise DataValidationError(
                    f"cluster '{cid}' has population size {n_i} smaller than "
                    f"enrolled count {ds.m_enrolled[i]}")
            if ds.full_enrollment and n_i != ds.m_enrolled[i]:
                raise DataValidationError(
                    f"full enrollment declared but cluster '{cid}' has population "
                    f"size {n_i} != enrolled count {ds.m_enrolled[i]}")
    arm1 = int(np.sum(ds.treatment == 1))
    arm0 = ds.m - arm1
    if arm1 == 0 or arm0 == 0:
        raise DataValidationError("both treatment arms must be present")

    warnings = []
    obs = ds.outcome_observed
    if not obs.any():
        raise DataValidationError("no outcomes observed in the dataset")
    miss_rate = 1.0 - float(obs.mean())
    cov_rates = {}
    for k, name in enumerate(ds.x_names):
        cov_rates[name] = float(np.isnan(ds.x_values[:, k]).mean())
    for k, name in enumerate(ds.c_names):
        cov_rates[name] = float(np.isnan(ds.c_values[:, k]).mean())
    pop_missing = int((~ds.population_observed).sum())
    if pop_missing and ds.full_enrollment:
        warnings.append(
            f"{pop_missing} clusters lack a population size; full enrollment "
            "sets it to the enrolled count")
    per_cluster_obs = np.bincount(ds.cluster_index, weights=obs.astype(float), minlength=ds.m)
    if (per_cluster_obs == 0).any():
        n_empty = int((per_cluster_obs == 0).sum())
        warnings.append(f"{n_empty} clusters have no observed outcomes")
    return ValidationReport(
        m=ds.m,
        n_individuals=ds.n_individuals,
        arm_sizes={1: arm1, 0: arm0},
        outcome_missing_rate=miss_rate,
        covariate_missing_rates=cov_rates,
        population_missing_count=pop_missing,
        warnings=warnings,
    )


def resolve_population_sizes(ds: TrialDataset) -> TrialDataset:
    """Fill population sizes under full enrollment (N taken as the enrolled count)."""
    if not ds.full_enrollment:
        return ds
    n_pop = np.where(ds.population_observed, ds.n_population, ds.m_enrolled.astype(float))
    return replace(ds, n_population=n_pop)


def expand_pair(values: np.ndarray, imputation_constant: float = 0.0):
    """Map a NaN-coded column to its (indicator, filled value) pair."""
    observed = ~np.isnan(values)
    return observed.astype(float), np.where(observed, values, imputation_constant)


def expand_missing_indicators(ds: TrialDataset, include_cluster_means: bool = False,
                              imputation_constant: float = 0.0) -> ExpandedDesign:
    """Build the expanded covariate matrix.

    Each covariate contributes the pair (observation indicator, filled
    value); the population size gets the same treatment and the enrolled
    count is appended as-is. The fill constant is arbitrary under linear
    adjustment because (1 - indicator) lies in the span of the intercept
    and the indicator. With include_cluster_means, each individual
    covariate also contributes its within-cluster mean over observed
    values (0 when none observed) and the mean indicator, broadcast to
    individuals.
    """
    ds = resolve_population_sizes(ds)
    const = imputation_constant
    idx = ds.cluster_index
    n = ds.n_individuals
    cols = []
    names = []
    cl_cols = []
    cl_names = []

    counts = np.bincount(idx, minlength=ds.m).astype(float)
    for k, name in enumerate(ds.x_names):
        r, rx = expand_pair(ds.x_values[:, k], const)
        cols += [r, rx]
        names += [f"r_{name}", name]
        cl_cols += [np.bincount(idx, weights=r, minlength=ds.m) / counts,
                    np.bincount(idx, weights=rx, minlength=ds.m) / counts]
        cl_names += [f"mean_r_{name}", f"mean_{name}"]
    for k, name in enumerate(ds.c_names):
        r, rc = expand_pair(ds.c_values[:, k], const)
        cols += [r[idx], rc[idx]]
        names += [f"r_{name}", name]
        cl_cols += [r, rc]
        cl_names += [f"r_{name}", name]
    r_n, n_filled = expand_pair(ds.n_population, const)
    cols += [r_n[idx], n_filled[idx]]
    names += ["r_popsize", "popsize"]
    cl_cols += [r_n, n_filled]
    cl_names += ["r_popsize", "popsize"]
    m_col = ds.m_enrolled.astype(float)
    cols.append(m_col[idx])
    names.append("enrolled")
    cl_cols.append(m_col)
    cl_names.append("enrolled")

    if include_cluster_means:
        for k, name in enumerate(ds.x_names):
            r, rx = expand_pair(ds.x_values[:, k])
            num = np.bincount(idx, weights=rx, minlength=ds.m)
            den = np.bincount(idx, weights=r, minlength=ds.m)
            with np.errstate(invalid="ignore"):
                obs_mean = np.where(den > 0, num / np.maximum(den, 1.0), 0.0)
            rbar = np.bincount(idx, weights=r, minlength=ds.m) / counts
            cols += [obs_mean[idx], rbar[idx]]
            names += [f"clmean_{name}", f"clmean_r_{name}"]

    values = np.column_stack(cols) if cols else np.zeros((n, 0))
    cluster_values = np.column_stack(cl_cols) if cl_cols else np.zeros((ds.m, 0))
    return ExpandedDesign(
        ds=ds,
        column_names=tuple(names),
        values=values,
        cluster_column_names=tuple(cl_names),
        cluster_values=cluster_values,
    )
