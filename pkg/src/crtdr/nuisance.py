"""Nuisance model fitting: missingness propensity, outcome regression,
treatment propensity.

Parametric routes: logistic regression by iteratively reweighted least
squares, and generalized estimating equations with an exchangeable
working correlation for the outcome regression. Both expose per-cluster
score contributions so they can be stacked into a joint estimating
system for variance estimation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import ExpandedDesign


class NonconvergenceError(RuntimeError):
    """Raised when an iterative fit fails to reach tolerance."""


class RankDeficiencyError(ValueError):
    """Raised when a design matrix has linearly dependent columns."""


class SeparationError(RuntimeError):
    """Raised when logistic coefficients diverge (separated data)."""


def expit(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_rank(X, names):
    if X.shape[1] == 0:
        raise RankDeficiencyError("design matrix has no columns")
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = [names[j] for j in piv[rank:]] if names else [str(j) for j in piv[rank:]]
        raise RankDeficiencyError(
            "design matrix is rank deficient; dependent column(s): " + ", ".join(bad))


# ---------------------------------------------------------------------------
# logistic regression (IRLS)
# ---------------------------------------------------------------------------

@dataclass
class LogisticFit:
    coef: np.ndarray
    names: tuple
    n_iter: int

    def predict(self, X):
        return expit(X @ self.coef)

    def fisher_covariance(self, X):
        p = self.predict(X)
        w = p * (1.0 - p)
        return np.linalg.inv((X * w[:, None]).T @ X)


def fit_logistic(X, y, names=None, max_iter=50, tol=1e-8) -> LogisticFit:
    """Fit a logistic regression by IRLS.

    Arguments
    ---------
    X : (n, p) design matrix, full column rank required
    y : (n,) binary responses
    names : optional column names used in error messages

    Convergence is declared when the largest coefficient step drops
    below `tol`. Raises SeparationError when the linear predictor
    diverges, NonconvergenceError after `max_iter` sweeps.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = tuple(names) if names is not None else None
    _check_rank(X, names)
    beta = np.zeros(X.shape[1])
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if np.max(np.abs(eta)) > 30.0:
            raise SeparationError(
                "logistic fit diverged (perfect or quasi-separation suspected)")
        p = expit(eta)
        w = p * (1.0 - p)
        try:
            step = np.linalg.solve((X * w[:, None]).T @ X, X.T @ (y - p))
        except np.linalg.LinAlgError as err:
            raise SeparationError(
                "weighted information matrix is singular (separation suspected)") from err
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return LogisticFit(coef=beta, names=names, n_iter=it)
    raise NonconvergenceError(f"IRLS did not converge in {max_iter} iterations")


def logistic_cluster_scores(X, y, cluster_idx, beta, m) -> np.ndarray:
    """Per-cluster logistic score contributions sum_j x_j (y_j - p_j)."""
    resid = y - expit(X @ beta)
    out = np.empty((m, X.shape[1]))
    for k in range(X.shape[1]):
        out[:, k] = np.bincount(cluster_idx, weights=X[:, k] * resid, minlength=m)
    return out


# ---------------------------------------------------------------------------
# GEE with exchangeable working correlation
# ---------------------------------------------------------------------------

@dataclass
class GeeFit:
    coef: np.ndarray
    rho: float
    phi: float
    names: tuple
    family: str
    n_iter: int

    def predict(self, X):
        eta = X @ self.coef
        return expit(eta) if self.family == "binomial-logit" else eta


def _exchangeable_solve(Xt, rt, cluster_idx, m, rho):
    """Compute per-row Corr(rho)^{-1} r and the quadratic form pieces.

    Uses the closed form Corr^{-1} r = r/(1-rho) - rho/((1-rho)(1+(n-1)rho)) * (sum r) 1.
    Returns (Corr^{-1} r as rows, per-cluster column sums of Xt, per-cluster shrink factors).
    """
    counts = np.bincount(cluster_idx, minlength=m).astype(float)
    shrink = rho / ((1.0 - rho) * (1.0 + (counts - 1.0) * rho))
    rsum = np.bincount(cluster_idx, weights=rt, minlength=m)
    cinv_r = rt / (1.0 - rho) - shrink[cluster_idx] * rsum[cluster_idx]
    return cinv_r, shrink


def _percluster_colsums(X, cluster_idx, m):
    out = np.empty((m, X.shape[1]))
    for k in range(X.shape[1]):
        out[:, k] = np.bincount(cluster_idx, weights=X[:, k], minlength=m)
    return out


def _moment_rho(resid_std, cluster_idx, m):
    # sum over within-cluster pairs of e_j e_j' = ((sum e)^2 - sum e^2)/2
    s1 = np.bincount(cluster_idx, weights=resid_std, minlength=m)
    s2 = np.bincount(cluster_idx, weights=resid_std**2, minlength=m)
    counts = np.bincount(cluster_idx, minlength=m).astype(float)
    pair_sum = float(np.sum((s1**2 - s2) / 2.0))
    n_pairs = float(np.sum(counts * (counts - 1.0) / 2.0))
    if n_pairs == 0:
        return 0.0, 1
    max_n = counts.max()
    lo = -1.0 / (max_n - 1.0) + 1e-6 if max_n > 1 else -0.999
    return float(np.clip(pair_sum / n_pairs, lo, 0.999)), 1


def fit_gee_exchangeable(X, y, cluster_idx, m, family="gaussian", names=None,
                         max_iter=50, tol=1e-8) -> GeeFit:
    """Fit a marginal regression by GEE with exchangeable correlation.

    Arguments
    ---------
    X, y : design and response over the modeled rows
    cluster_idx : (n,) cluster position per row (positions in 0..m-1)
    m : total number of clusters
    family : "gaussian" (identity link) or "binomial-logit"

    The correlation is re-estimated each sweep from Pearson residuals by
    the moment estimator and treated as fixed afterwards.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = tuple(names) if names is not None else None
    _check_rank(X, names)
    n, p = X.shape
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    if family == "binomial-logit":
        beta = fit_logistic(X, y, names=names, max_iter=max_iter, tol=1e-6).coef
    rho = 0.0
    phi = 1.0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if family == "binomial-logit":
            mu = expit(eta)
            v = mu * (1.0 - mu)
        else:
            mu = eta
            v = np.ones(n)
        sqrt_v = np.sqrt(v)
        resid = (y - mu) / sqrt_v
        phi = float(np.sum(resid**2) / max(n - p, 1))
        rho, _ = _moment_rho(resid / np.sqrt(phi), cluster_idx, m)
        Xt = X * sqrt_v[:, None]
        cinv_r, shrink = _exchangeable_solve(Xt, resid, cluster_idx, m, rho)
        score = Xt.T @ cinv_r
        colsums = _percluster_colsums(Xt, cluster_idx, m)
        info = (Xt.T @ Xt) / (1.0 - rho) - np.einsum(
            "i,ip,iq->pq", shrink, colsums, colsums)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as err:
            raise RankDeficiencyError("GEE information matrix is singular") from err
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            return GeeFit(coef=beta, rho=rho, phi=phi, names=names,
                          family=family, n_iter=it)
    raise NonconvergenceError(f"GEE did not converge in {max_iter} iterations")


def gee_cluster_scores(X, y, cluster_idx, beta, rho, m, family="gaussian") -> np.ndarray:
    """Per-cluster GEE score contributions at fixed correlation.

    The dispersion factor is omitted; it rescales the whole block and
    cancels in the sandwich.
    """
    eta = X @ beta
    if family == "binomial-logit":
        mu = expit(eta)
        v = mu * (1.0 - mu)
    else:
        mu = eta
        v = np.ones(len(eta))
    sqrt_v = np.sqrt(v)
    resid = (y - mu) / sqrt_v
    Xt = X * sqrt_v[:, None]
    counts = np.bincount(cluster_idx, minlength=m).astype(float)
    shrink = rho / ((1.0 - rho) * (1.0 + (counts - 1.0) * rho))
    rsum = np.bincount(cluster_idx, weights=resid, minlength=m)
    cinv_r = resid / (1.0 - rho) - shrink[cluster_idx] * rsum[cluster_idx]
    out = np.empty((m, X.shape[1]))
    for k in range(X.shape[1]):
        out[:, k] = np.bincount(cluster_idx, weights=Xt[:, k] * cinv_r, minlength=m)
    return out


# ---------------------------------------------------------------------------
# model designs on the expanded covariates
# ---------------------------------------------------------------------------

@dataclass
class ModelDesign:
    names: tuple               # retained columns, "intercept" first
    X: np.ndarray              # (rows, p) at the observed treatment
    treatment_col: int         # -1 when treatment is excluded
    dropped: tuple             # (name, reason) pairs

    def at_arm(self, a):
        if self.treatment_col < 0:
            return self.X
        X = self.X.copy()
        X[:, self.treatment_col] = float(a)
        return X


def _drop_redundant(cols, names):
    """Drop constant and duplicate columns (deterministic, first kept)."""
    kept, kept_names, dropped = [], [], []
    for col, name in zip(cols, names):
        if np.all(col == col[0]):
            dropped.append((name, "constant"))
            continue
        dup = next((kn for kc, kn in zip(kept, kept_names) if np.array_equal(kc, col)), None)
        if dup is not None:
            dropped.append((name, f"duplicate of {dup}"))
            continue
        kept.append(col)
        kept_names.append(name)
    return kept, kept_names, dropped


def build_design(expanded: ExpandedDesign, include_treatment=True, columns=None) -> ModelDesign:
    """Individual-level model design: intercept, treatment, covariate columns.

    Constant and duplicate covariate columns are dropped (reported in
    `dropped`) so downstream fits meet their full-rank precondition.
    """
    ds = expanded.ds
    if columns is None:
        columns = expanded.column_names
    sel = [expanded.column_names.index(c) for c in columns]
    raw = [expanded.values[:, j] for j in sel]
    kept, kept_names, dropped = _drop_redundant(raw, list(columns))
    n = ds.n_individuals
    pieces = [np.ones(n)]
    names = ["intercept"]
    trt_col = -1
    if include_treatment:
        trt_col = 1
        pieces.append(ds.treatment[ds.cluster_index].astype(float))
        names.append("treatment")
    pieces.extend(kept)
    names.extend(kept_names)
    return ModelDesign(names=tuple(names), X=np.column_stack(pieces),
                       treatment_col=trt_col, dropped=tuple(dropped))


def build_cluster_design(expanded: ExpandedDesign, columns=None) -> ModelDesign:
    """Cluster-level design (intercept + cluster summaries) for the treatment model."""
    if columns is None:
        columns = expanded.cluster_column_names
    sel = [expanded.cluster_column_names.index(c) for c in columns]
    raw = [expanded.cluster_values[:, j] for j in sel]
    kept, kept_names, dropped = _drop_redundant(raw, list(columns))
    m = expanded.ds.m
    pieces = [np.ones(m)] + kept
    names = ["intercept"] + kept_names
    return ModelDesign(names=tuple(names), X=np.column_stack(pieces),
                       treatment_col=-1, dropped=tuple(dropped))


# ---------------------------------------------------------------------------
# fitted nuisance bundle (parametric route)
# ---------------------------------------------------------------------------

@dataclass
class NuisancePredictions:
    """Per-individual nuisance values consumed by the estimator.

    kappa : missingness propensity at the observed arm, clipped into
        [floor, 1]
    eta1, eta0 : outcome regression evaluated with treatment set to 1, 0
    pi_cluster : per-cluster treatment propensity (constant when no
        treatment model is used)
    """

    kappa: np.ndarray
    eta1: np.ndarray
    eta0: np.ndarray
    pi_cluster: np.ndarray
    fold_ids: np.ndarray | None = None


@dataclass
class ParametricNuisanceFit:
    kappa_fit: LogisticFit
    eta_fit: GeeFit
    treatment_fit: LogisticFit | None
    kappa_design: ModelDesign
    eta_design: ModelDesign
    treatment_design: ModelDesign | None
    outcome_rows: np.ndarray        # boolean mask of rows used in the outcome fit
    propensity_floor: float
    predictions: NuisancePredictions


def fit_parametric_nuisances(expanded: ExpandedDesign, outcome_observed,
                             propensity_floor=0.01, eta_family="gaussian",
                             model_treatment=False, design_columns=None,
                             treatment_columns=None) -> ParametricNuisanceFit:
    """Fit logistic missingness, GEE outcome, and optional treatment models.

    Predictions are assembled for every enrolled individual: the
    missingness propensity at the observed arm (clipped at the floor)
    and the outcome regression at both arms.
    """
    ds = expanded.ds
    idx = ds.cluster_index
    kappa_design = build_design(expanded, include_treatment=True, columns=design_columns)
    r_y = outcome_observed.astype(float)
    kappa_fit = fit_logistic(kappa_design.X, r_y, names=kappa_design.names)

    eta_design = build_design(expanded, include_treatment=True, columns=design_columns)
    obs = outcome_observed
    eta_fit = fit_gee_exchangeable(
        eta_design.X[obs], ds.outcome[obs], idx[obs], ds.m,
        family=eta_family, names=eta_design.names)

    treatment_fit = None
    treatment_design = None
    if model_treatment:
        treatment_design = build_cluster_design(expanded, columns=treatment_columns)
        treatment_fit = fit_logistic(
            treatment_design.X, ds.treatment.astype(float), names=treatment_design.names)
        pi_cluster = np.clip(treatment_fit.predict(treatment_design.X), 1e-3, 1.0 - 1e-3)
    else:
        pi_cluster = np.full(ds.m, ds.pi)

    kappa = np.clip(kappa_fit.predict(kappa_design.X), propensity_floor, 1.0)
    predict = (lambda X: expit(X @ eta_fit.coef)) if eta_family == "binomial-logit" \
        else (lambda X: X @ eta_fit.coef)
    eta1 = predict(eta_design.at_arm(1))
    eta0 = predict(eta_design.at_arm(0))
    preds = NuisancePredictions(kappa=kappa, eta1=eta1, eta0=eta0, pi_cluster=pi_cluster)
    return ParametricNuisanceFit(
        kappa_fit=kappa_fit, eta_fit=eta_fit, treatment_fit=treatment_fit,
        kappa_design=kappa_design, eta_design=eta_design,
        treatment_design=treatment_design, outcome_rows=obs,
        propensity_floor=propensity_floor, predictions=preds)
