"""Variance estimation: stacked sandwich, cross-fit covariance,
small-sample correction, and t-based intervals.

The sandwich treats each cluster as the independent unit. The bread is
a numerically differentiated Jacobian of the average estimating
function (central differences); the effect scale enters through the
delta method on the two arm means rather than through an extra stacked
row.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable

import numpy as np

from .data import TrialDataset
from .estimator import EstimateResult, dr_percluster, scaled_weights
from .nuisance import (ParametricNuisanceFit, expit, gee_cluster_scores,
                       logistic_cluster_scores)


class NumericalError(RuntimeError):
    """Raised when a variance computation cannot proceed."""


# ---------------------------------------------------------------------------
# Student t quantile (internal routine)
# ---------------------------------------------------------------------------

def _beta_cont_fraction(a, b, x, max_iter=300, eps=1e-15):
    # Lentz's algorithm for the incomplete beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-300:
        d = 1e-300
    d = 1.0 / d
    h = d
    for m_it in range(1, max_iter + 1):
        m2 = 2 * m_it
        aa = m_it * (b - m_it) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        h *= d * c
        aa = -(a + m_it) * (qab + m_it) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise NumericalError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log(1.0 - x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_fraction(a, b, x) / a
    return 1.0 - front * _beta_cont_fraction(b, a, 1.0 - x) / b


def t_cdf(t, df):
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_quantile(p, df):
    """Quantile of the Student t distribution, accurate to ~1e-10.

    Bracketing bisection with a Newton polish on the CDF built from the
    regularized incomplete beta function. df=None or infinity gives the
    normal quantile.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    if df is None or (isinstance(df, float) and math.isinf(df)):
        return NormalDist().inv_cdf(p)
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        hi *= 2.0
        if hi > 1e12:
            raise NumericalError("t quantile bracket expansion failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, lo):
            break
    t = 0.5 * (lo + hi)
    log_norm = (math.lgamma((df + 1.0) / 2.0) - math.lgamma(df / 2.0)
                - 0.5 * math.log(df * math.pi))
    for _ in range(8):
        pdf = math.exp(log_norm - (df + 1.0) / 2.0 * math.log1p(t * t / df))
        if pdf <= 0:
            break
        step = (t_cdf(t, df) - p) / pdf
        t -= step
        if abs(step) < 1e-13 * max(1.0, abs(t)):
            break
    return t


# ---------------------------------------------------------------------------
# estimating systems and the sandwich
# ---------------------------------------------------------------------------

@dataclass
class EstimatingSystem:
    """A stacked estimating function with per-cluster contributions.

    psi(theta) returns the (m, d) matrix of cluster contributions;
    blocks names the coordinate groups of theta in order.
    """

    theta: np.ndarray
    blocks: tuple
    psi: Callable

    @property
    def dim(self):
        return len(self.theta)

    def block_slice(self, name):
        start = 0
        for bname, size in self.blocks:
            if bname == name:
                return slice(start, start + size)
            start += size
        raise KeyError(f"no block named '{name}'")


def numeric_jacobian(psi_mean: Callable, theta: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of the averaged estimating function.

    Step for coordinate j is max(1e-6, 1e-6 |theta_j|).
    """
    d = len(theta)
    base = np.asarray(psi_mean(theta), dtype=float)
    jac = np.empty((len(base), d))
    for j in range(d):
        h = max(1e-6, 1e-6 * abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (np.asarray(psi_mean(up)) - np.asarray(psi_mean(dn))) / (2.0 * h)
    return jac


@dataclass
class SandwichResult:
    covariance: np.ndarray   # covariance of theta_hat (already divided by m)
    bread: np.ndarray
    meat: np.ndarray


def sandwich_covariance(system: EstimatingSystem) -> SandwichResult:
    """Empirical sandwich covariance of a stacked estimating system."""
    contrib = np.asarray(system.psi(system.theta), dtype=float)
    m = contrib.shape[0]
    meat = contrib.T @ contrib / m
    psi_mean = lambda th: np.asarray(system.psi(th)).mean(axis=0)
    bread = numeric_jacobian(psi_mean, system.theta)
    try:
        binv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as err:
        raise NumericalError("bread matrix is singular") from err
    cov = binv @ meat @ binv.T / m
    return SandwichResult(covariance=cov, bread=bread, meat=meat)


def small_sample_factor(m: int, n_covariate_columns: int) -> float:
    """Variance inflation factor m / (m - #covariates)."""
    if m <= n_covariate_columns:
        raise NumericalError(
            f"small-sample correction undefined: m={m} <= covariate count {n_covariate_columns}")
    return m / (m - n_covariate_columns)


@dataclass
class IntervalResult:
    estimate: float
    se: float
    level: float
    lower: float
    upper: float
    df: int
    variance_raw: float
    correction: float


def ci_tdist(estimate: float, variance: float, m: int, n_covariate_columns: int,
             level: float = 0.95) -> IntervalResult:
    """Small-sample corrected t interval.

    The raw variance is inflated by m/(m - c) and the critical value is
    the t quantile with m - c degrees of freedom.
    """
    if variance < 0 or not np.isfinite(variance):
        raise NumericalError(f"variance must be finite and nonnegative, got {variance}")
    factor = small_sample_factor(m, n_covariate_columns)
    var_corr = variance * factor
    se = math.sqrt(var_corr)
    if se == 0:
        raise NumericalError("standard error is zero; interval undefined")
    df = m - n_covariate_columns
    tcrit = t_quantile(1.0 - (1.0 - level) / 2.0, df)
    return IntervalResult(estimate=estimate, se=se, level=level,
                          lower=estimate - tcrit * se,
                          upper=estimate + tcrit * se, df=df,
                          variance_raw=variance, correction=factor)


# ---------------------------------------------------------------------------
# system builders
# ---------------------------------------------------------------------------

def assemble_dr_system(ds: TrialDataset, mu, *, weights="constant",
                       propensity_floor=0.01,
                       kappa_part=None, kappa_fixed=None,
                       eta_part=None, eta_fixed=None,
                       treatment_part=None) -> EstimatingSystem:
    """Stack the DR arm means with whichever nuisance blocks were fitted.

    kappa_part = (design, coef) for a fitted logistic missingness model,
    or kappa_fixed gives a known per-individual propensity vector (no
    block). eta_part = (design, coef, rho, family, observed_mask) for a
    fitted outcome regression, or eta_fixed = (eta1, eta0) known
    vectors. treatment_part = (design, coef) adds the treatment
    propensity block; otherwise the known randomization probability is
    used. The arm-mean rows re-evaluate predictions at perturbed
    coefficients so the Jacobian carries each fit's estimation effect.
    """
    idx = ds.cluster_index
    m = ds.m
    w = scaled_weights(ds, weights)
    floor = propensity_floor
    blocks = [("mu", 2)]
    theta = [np.asarray(mu, dtype=float)]
    if eta_part is not None:
        eta_design, eta_coef, rho, eta_family, obs_mask = eta_part
        X_eta1 = eta_design.at_arm(1)
        X_eta0 = eta_design.at_arm(0)
        X_eta_obs = eta_design.X[obs_mask]
        y_obs = ds.outcome[obs_mask]
        idx_obs = idx[obs_mask]
        p_y = X_eta_obs.shape[1]
        blocks.append(("outcome", p_y))
        theta.append(eta_coef)
    else:
        p_y = 0
        fixed_eta1, fixed_eta0 = eta_fixed
    if kappa_part is not None:
        kappa_design, kappa_coef = kappa_part
        X_kap = kappa_design.X
        p_r = X_kap.shape[1]
        r_y = ds.outcome_observed.astype(float)
        blocks.append(("missingness", p_r))
        theta.append(kappa_coef)
    else:
        p_r = 0
    if treatment_part is not None:
        Z, trt_coef = treatment_part
        p_a = Z.shape[1]
        blocks.append(("treatment", p_a))
        theta.append(trt_coef)
        a_cluster = ds.treatment.astype(float)
    else:
        p_a = 0
    theta = np.concatenate([np.atleast_1d(t) for t in theta])

    def psi(th):
        mu1, mu0 = th[0], th[1]
        pos = 2
        cols = []
        if p_y:
            th_y = th[pos:pos + p_y]
            pos_y = pos
            pos += p_y
            if eta_part[3] == "binomial-logit":
                eta1 = expit(X_eta1 @ th_y)
                eta0 = expit(X_eta0 @ th_y)
            else:
                eta1 = X_eta1 @ th_y
                eta0 = X_eta0 @ th_y
        else:
            eta1, eta0 = fixed_eta1, fixed_eta0
        if p_r:
            th_r = th[pos:pos + p_r]
            pos += p_r
            kappa = np.clip(expit(X_kap @ th_r), floor, 1.0)
        else:
            kappa = kappa_fixed
        if p_a:
            th_a = th[pos:pos + p_a]
            pi_cluster = np.clip(expit(Z @ th_a), 1e-3, 1.0 - 1e-3)
        else:
            pi_cluster = np.full(m, ds.pi)
        contrib = dr_percluster(ds, w, kappa, eta1, eta0, pi_cluster)
        cols = [contrib[:, 0] - mu1, contrib[:, 1] - mu0]
        out = [np.column_stack(cols)]
        if p_y:
            out.append(gee_cluster_scores(X_eta_obs, y_obs, idx_obs,
                                          th[pos_y:pos_y + p_y], rho, m,
                                          family=eta_part[3]))
        if p_r:
            out.append(logistic_cluster_scores(X_kap, r_y, idx, th_r, m))
        if p_a:
            out.append(Z * (a_cluster - expit(Z @ th_a))[:, None])
        return np.column_stack(out)

    return EstimatingSystem(theta=theta, blocks=tuple(blocks), psi=psi)


def build_dr_system(ds: TrialDataset, fit: ParametricNuisanceFit,
                    result: EstimateResult, weights="constant") -> EstimatingSystem:
    """Stacked system for the fully parametric fit bundle."""
    treatment_part = None
    if fit.treatment_fit is not None:
        treatment_part = (fit.treatment_design.X, fit.treatment_fit.coef)
    return assemble_dr_system(
        ds, (result.mu1, result.mu0), weights=weights,
        propensity_floor=fit.propensity_floor,
        kappa_part=(fit.kappa_design, fit.kappa_fit.coef),
        eta_part=(fit.eta_design, fit.eta_fit.coef, fit.eta_fit.rho,
                  fit.eta_fit.family, fit.outcome_rows),
        treatment_part=treatment_part)


def build_mean_system(percluster: np.ndarray, mu1: float, mu0: float) -> EstimatingSystem:
    """Two-arm mean system for estimators without stacked nuisances."""
    theta = np.array([mu1, mu0])

    def psi(th):
        return np.column_stack([percluster[:, 0] - th[0], percluster[:, 1] - th[1]])

    return EstimatingSystem(theta=theta, blocks=(("mu", 2),), psi=psi)


def build_ipw_system(ds: TrialDataset, kappa_fit, kappa_design, result,
                     propensity_floor) -> EstimatingSystem:
    """Individual-pooled IPW arm means stacked with the missingness model."""
    idx = ds.cluster_index
    m = ds.m
    obs = ds.outcome_observed
    a_ind = ds.treatment[idx].astype(bool)
    y0 = np.where(obs, ds.outcome, 0.0)
    r_y = obs.astype(float)
    X_kap = kappa_design.X
    p_r = X_kap.shape[1]
    theta = np.concatenate([[result.mu1, result.mu0], kappa_fit.coef])
    blocks = (("mu", 2), ("missingness", p_r))
    # normalizers fixed at the estimate: per-arm mean inverse-probability mass
    kappa_hat = np.clip(expit(X_kap @ kappa_fit.coef), propensity_floor, 1.0)
    w_hat = np.where(obs, 1.0 / kappa_hat, 0.0)
    den1 = np.sum(w_hat * a_ind) / m
    den0 = np.sum(w_hat * ~a_ind) / m

    def psi(th):
        mu1, mu0 = th[0], th[1]
        th_r = th[2:]
        kappa = np.clip(expit(X_kap @ th_r), propensity_floor, 1.0)
        w = np.where(obs, 1.0 / kappa, 0.0)
        s1 = np.bincount(idx, weights=w * a_ind * (y0 - mu1), minlength=m) / den1
        s0 = np.bincount(idx, weights=w * ~a_ind * (y0 - mu0), minlength=m) / den0
        return np.column_stack(
            [s1, s0, logistic_cluster_scores(X_kap, r_y, idx, th_r, m)])

    return EstimatingSystem(theta=theta, blocks=blocks, psi=psi)


def delta_method_variance(cov_mu: np.ndarray, gradient: np.ndarray) -> float:
    return float(gradient @ cov_mu @ gradient)


def effect_variance_sandwich(system: EstimatingSystem, gradient: np.ndarray):
    """Sandwich covariance of the mu block mapped through the effect scale."""
    sand = sandwich_covariance(system)
    sl = system.block_slice("mu")
    cov_mu = sand.covariance[sl, sl]
    return delta_method_variance(cov_mu, gradient), sand


# ---------------------------------------------------------------------------
# cross-fit variance
# ---------------------------------------------------------------------------

def crossfit_variance(percluster: np.ndarray, fold_ids: np.ndarray,
                      gradient: np.ndarray):
    """Cross-fit covariance: average of within-fold covariances of the
    per-cluster arm contributions, delta method, divided by m.

    With a single fold this reduces to the plain covariance around the
    overall mean.
    """
    m = percluster.shape[0]
    folds = np.unique(fold_ids)
    sigma = np.zeros((2, 2))
    for k in folds:
        sel = percluster[fold_ids == k]
        centered = sel - sel.mean(axis=0)
        sigma += centered.T @ centered / len(sel)
    sigma /= len(folds)
    if np.all(sigma == 0):
        warnings.warn("per-cluster contributions are identical; variance is zero")
    cov_mu = sigma / m
    return delta_method_variance(cov_mu, gradient), cov_mu
