"""Cluster-average treatment effect estimators.

The doubly robust estimator averages per-cluster contributions built
from scaled within-cluster weights, an inverse-probability residual
term for the observed arm, and the outcome regression evaluated at both
arms. Comparators: an individual-pooled IPW estimator and the
unadjusted difference of arm means of cluster averages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import TrialDataset
from .nuisance import NuisancePredictions


class DomainError(ValueError):
    """Raised when arm means fall outside an effect scale's domain."""


# ---------------------------------------------------------------------------
# effect scales
# ---------------------------------------------------------------------------

def effect_scale(name: str):
    """Return (f, gradient, domain_check) for an effect scale name."""
    if name == "difference":
        return (lambda m1, m0: m1 - m0,
                lambda m1, m0: np.array([1.0, -1.0]),
                lambda m1, m0: None)
    if name == "ratio":
        def check_ratio(m1, m0):
            if m0 <= 0 or m1 <= 0:
                raise DomainError(
                    f"ratio scale requires positive arm means, got ({m1:.6g}, {m0:.6g})")
        return (lambda m1, m0: m1 / m0,
                lambda m1, m0: np.array([1.0 / m0, -m1 / m0**2]),
                check_ratio)
    if name == "odds-ratio":
        def check_or(m1, m0):
            if not (0.0 < m1 < 1.0 and 0.0 < m0 < 1.0):
                raise DomainError(
                    f"odds-ratio scale requires arm means in (0, 1), got ({m1:.6g}, {m0:.6g})")
        return (lambda m1, m0: m1 * (1.0 - m0) / (m0 * (1.0 - m1)),
                lambda m1, m0: np.array([(1.0 - m0) / (m0 * (1.0 - m1)**2),
                                         -m1 / (m0**2 * (1.0 - m1))]),
                check_or)
    raise ValueError(f"unknown effect scale '{name}'")


@dataclass
class EstimateResult:
    mu1: float
    mu0: float
    effect: float
    scale: str
    gradient: np.ndarray       # d effect / d (mu1, mu0)
    percluster: np.ndarray     # (m, 2) per-cluster arm contributions
    estimator: str = "dr"


def _finalize(percluster, scale, estimator, mu=None):
    if mu is None:
        mu1, mu0 = percluster.mean(axis=0)
    else:
        mu1, mu0 = mu
    f, grad, check = effect_scale(scale)
    check(mu1, mu0)
    return EstimateResult(mu1=float(mu1), mu0=float(mu0),
                          effect=float(f(mu1, mu0)), scale=scale,
                          gradient=grad(mu1, mu0), percluster=percluster,
                          estimator=estimator)


# ---------------------------------------------------------------------------
# within-cluster weights
# ---------------------------------------------------------------------------

def scaled_weights(ds: TrialDataset, scheme="constant") -> np.ndarray:
    """Per-individual weights scaled to sum to one within each cluster.

    `scheme` is "constant", "exchangeable" / ("exchangeable", rho), or a
    raw per-individual weight array. The scaled optimum under an
    exchangeable outcome covariance is uniform for any valid rho, so the
    exchangeable scheme shares the constant scheme's code path and its
    output exactly. Scaling makes the estimator invariant to per-cluster
    rescaling of raw weights.
    """
    idx = ds.cluster_index
    if isinstance(scheme, tuple) and len(scheme) == 2 and scheme[0] == "exchangeable":
        rho = float(scheme[1])
        if not 0.0 <= rho < 1.0:
            raise ValueError(f"exchangeable correlation must lie in [0, 1), got {rho}")
        scheme = "constant"
    if isinstance(scheme, str):
        if scheme == "exchangeable":
            scheme = "constant"
        if scheme != "constant":
            raise ValueError(f"unknown weight scheme '{scheme}'")
        raw = np.ones(ds.n_individuals)
    else:
        raw = np.asarray(scheme, dtype=float)
        if raw.shape != (ds.n_individuals,):
            raise ValueError("weight vector length must match individual count")
        if np.any(raw <= 0):
            raise ValueError("weights must be positive")
    totals = np.bincount(idx, weights=raw, minlength=ds.m)
    return raw / totals[idx]


def optimal_exchangeable_weights(n: int, rho: float, sigma2: float = 1.0) -> np.ndarray:
    """Scaled precision-optimal weights for an exchangeable outcome covariance.

    The inverse of sigma2 * [(1-rho) I + rho J] applied to the ones
    vector is proportional to the ones vector, so the scaled optimum is
    uniform regardless of rho and sigma2.
    """
    if n < 1:
        raise ValueError("cluster size must be at least 1")
    if not -1.0 / max(n - 1, 1) < rho < 1.0:
        raise ValueError(f"exchangeable correlation {rho} invalid for size {n}")
    if sigma2 <= 0:
        raise ValueError("variance must be positive")
    raw = np.full(n, 1.0 / (sigma2 * (1.0 - rho + n * rho)))
    return raw / raw.sum()


# ---------------------------------------------------------------------------
# doubly robust estimator
# ---------------------------------------------------------------------------

def dr_percluster(ds: TrialDataset, weights: np.ndarray, kappa: np.ndarray,
                  eta1: np.ndarray, eta0: np.ndarray,
                  pi_cluster: np.ndarray) -> np.ndarray:
    """Per-cluster arm contributions of the doubly robust estimator.

    For each enrolled individual the contribution to arm a is
    w * [ 1{A=a} / P(A=a) * R (Y - eta_a) / kappa + eta_a ];
    rows with missing outcomes contribute only the regression term.
    Returns the (m, 2) matrix of within-cluster sums, columns (arm 1, arm 0).
    """
    idx = ds.cluster_index
    m = ds.m
    obs = ds.outcome_observed
    a_ind = ds.treatment[idx].astype(bool)
    pi_i = pi_cluster[idx]
    y0 = np.where(obs, ds.outcome, 0.0)
    resid1 = np.where(obs & a_ind, (y0 - eta1) / kappa, 0.0) / pi_i
    resid0 = np.where(obs & ~a_ind, (y0 - eta0) / kappa, 0.0) / (1.0 - pi_i)
    d1 = weights * (np.where(a_ind, resid1, 0.0) + eta1)
    d0 = weights * (np.where(~a_ind, resid0, 0.0) + eta0)
    out = np.empty((m, 2))
    out[:, 0] = np.bincount(idx, weights=d1, minlength=m)
    out[:, 1] = np.bincount(idx, weights=d0, minlength=m)
    return out


def dr_cluster_average(ds: TrialDataset, preds: NuisancePredictions,
                       weights="constant", scale="difference") -> EstimateResult:
    """Doubly robust cluster-average effect estimate.

    Under full enrollment this is the weighted estimator with scaled
    within-cluster weights; with within-cluster sampling the same form
    with uniform weights over enrolled individuals is the
    sampling-adjusted estimator, provided the nuisance predictions
    depend only on individual-level inputs.
    """
    w = scaled_weights(ds, weights)
    percluster = dr_percluster(ds, w, preds.kappa, preds.eta1, preds.eta0,
                               preds.pi_cluster)
    return _finalize(percluster, scale, "dr")


def individual_average_reweight(ds: TrialDataset, result: EstimateResult,
                                scale=None) -> EstimateResult:
    """Shift a cluster-average result to the individual-average estimand.

    Each cluster's contribution is scaled by its population size over
    the mean population size. Requires known population sizes.
    """
    from .data import resolve_population_sizes
    ds = resolve_population_sizes(ds)
    if not ds.population_observed.all():
        raise ValueError("individual-average reweighting requires population sizes")
    n_pop = ds.n_population
    factors = n_pop / n_pop.mean()
    percluster = result.percluster * factors[:, None]
    return _finalize(percluster, scale or result.scale, result.estimator + "-individual")


# ---------------------------------------------------------------------------
# comparators
# ---------------------------------------------------------------------------

def ipw_estimate(ds: TrialDataset, kappa: np.ndarray, scale="difference",
                 pooling="individual") -> EstimateResult:
    """Inverse-probability-weighted comparator.

    pooling="individual" weighs every individual equally across
    clusters (the common GEE-IPW form; under informative cluster size it
    targets the individual-average estimand, not the cluster average).
    pooling="cluster" is the doubly robust estimator with the outcome
    regression forced to zero.
    """
    idx = ds.cluster_index
    obs = ds.outcome_observed
    a_ind = ds.treatment[idx].astype(bool)
    y0 = np.where(obs, ds.outcome, 0.0)
    if pooling == "cluster":
        z = np.zeros(ds.n_individuals)
        preds = NuisancePredictions(kappa=kappa, eta1=z, eta0=z,
                                    pi_cluster=np.full(ds.m, ds.pi))
        res = dr_cluster_average(ds, preds, scale=scale)
        res.estimator = "ipw-cluster"
        return res
    if pooling != "individual":
        raise ValueError(f"unknown pooling '{pooling}'")
    w = np.where(obs, 1.0 / kappa, 0.0)
    num1 = float(np.sum(w * y0 * a_ind))
    den1 = float(np.sum(w * a_ind))
    num0 = float(np.sum(w * y0 * ~a_ind))
    den0 = float(np.sum(w * ~a_ind))
    if den1 == 0 or den0 == 0:
        raise ValueError("an arm has no observed outcomes")
    mu1, mu0 = num1 / den1, num0 / den0
    # per-cluster score contributions of the pooled estimating equations,
    # normalized so each arm's average derivative is -1
    s1 = np.bincount(idx, weights=w * a_ind * (y0 - mu1), minlength=ds.m) / (den1 / ds.m)
    s0 = np.bincount(idx, weights=w * ~a_ind * (y0 - mu0), minlength=ds.m) / (den0 / ds.m)
    percluster = np.column_stack([mu1 + s1, mu0 + s0])
    return _finalize(percluster, scale, "ipw", mu=(mu1, mu0))


def unadjusted_estimate(ds: TrialDataset, scale="difference") -> EstimateResult:
    """Arm means of per-cluster observed-outcome averages.

    Clusters without a single observed outcome are excluded from their
    arm's mean and flagged with a warning.
    """
    idx = ds.cluster_index
    obs = ds.outcome_observed
    y0 = np.where(obs, ds.outcome, 0.0)
    n_obs = np.bincount(idx, weights=obs.astype(float), minlength=ds.m)
    y_sum = np.bincount(idx, weights=y0, minlength=ds.m)
    has = n_obs > 0
    if not has.all():
        skipped = [str(ds.cluster_ids[i]) for i in np.flatnonzero(~has)]
        warnings.warn("clusters without observed outcomes excluded from "
                      "the unadjusted means: " + ", ".join(skipped))
    cl_mean = np.where(has, y_sum / np.maximum(n_obs, 1.0), np.nan)
    arm1 = (ds.treatment == 1) & has
    arm0 = (ds.treatment == 0) & has
    if not arm1.any() or not arm0.any():
        raise ValueError("an arm has no clusters with observed outcomes")
    mu1 = float(cl_mean[arm1].mean())
    mu0 = float(cl_mean[arm0].mean())
    # score form: arm indicator times deviation, scaled to mean derivative -1
    s1 = np.where(arm1, cl_mean - mu1, 0.0) / (arm1.sum() / ds.m)
    s0 = np.where(arm0, cl_mean - mu0, 0.0) / (arm0.sum() / ds.m)
    percluster = np.column_stack([mu1 + np.where(arm1, s1, 0.0),
                                  mu0 + np.where(arm0, s0, 0.0)])
    return _finalize(percluster, scale, "unadjusted", mu=(mu1, mu0))
