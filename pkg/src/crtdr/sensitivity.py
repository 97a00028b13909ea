"""Sensitivity analysis for departures from the identification
assumptions: non-uniform within-cluster sampling (delta scale) and
outcome missingness not at random (gamma scale).

The asymptotic bias under the working departures is linear,
S = nonparticipation_fraction * delta_diff + rate1 * gamma1 - rate0 * gamma0,
which gives a closed-form tipping point: the smallest adverse gamma
contrast at which the bias-corrected interval stops excluding zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TrialDataset, resolve_population_sizes
from .variance import t_quantile


@dataclass
class BiasComponents:
    """Estimated ingredients of the departure bias.

    nonparticipation_fraction uses observed population sizes; clusters
    with unknown N contribute the conservative bound (Nmax - M)/Nmax.
    The optimistic variant counts those clusters as 0. Missing-outcome
    fractions are cluster-mean proportions (per arm and pooled over all
    clusters).
    """

    nonparticipation_fraction: float
    nonparticipation_optimistic: float
    missing_frac_arm1: float
    missing_frac_arm0: float
    missing_frac_pooled: float
    provenance: dict = field(default_factory=dict)


def estimate_bias_components(ds: TrialDataset, population_cap: float | None = None) -> BiasComponents:
    """Estimate the bias components from a dataset.

    population_cap optionally bounds unknown population sizes when no
    cluster has an observed N; otherwise the largest observed N is used
    for the conservative bound.
    """
    ds = resolve_population_sizes(ds)
    m_i = ds.m_enrolled.astype(float)
    obs_n = ds.population_observed
    frac = np.zeros(ds.m)
    frac[obs_n] = (ds.n_population[obs_n] - m_i[obs_n]) / ds.n_population[obs_n]
    provenance = {"clusters_missing_population": int((~obs_n).sum())}
    frac_low = frac.copy()
    if (~obs_n).any():
        if obs_n.any():
            cap = float(ds.n_population[obs_n].max())
            provenance["rule"] = "largest observed population size"
        elif population_cap is not None:
            cap = float(population_cap)
            provenance["rule"] = "user-supplied population cap"
        else:
            cap = None
            provenance["rule"] = "no population information; conservative bound is 1"
        if cap is not None:
            frac[~obs_n] = np.maximum(cap - m_i[~obs_n], 0.0) / cap
        else:
            frac[~obs_n] = 1.0
        frac_low[~obs_n] = 0.0
        provenance["bounded"] = True
    else:
        provenance["bounded"] = False

    obs = ds.outcome_observed.astype(float)
    idx = ds.cluster_index
    counts = np.bincount(idx, minlength=ds.m).astype(float)
    miss_cluster = 1.0 - np.bincount(idx, weights=obs, minlength=ds.m) / counts
    arm1 = ds.treatment == 1
    return BiasComponents(
        nonparticipation_fraction=float(frac.mean()),
        nonparticipation_optimistic=float(frac_low.mean()),
        missing_frac_arm1=float(miss_cluster[arm1].mean()),
        missing_frac_arm0=float(miss_cluster[~arm1].mean()),
        missing_frac_pooled=float(miss_cluster.mean()),
        provenance=provenance,
    )


def bias_S(comps: BiasComponents, delta_diff: float, gamma1: float, gamma0: float) -> float:
    """Linear departure bias for given sensitivity parameters."""
    return (comps.nonparticipation_fraction * delta_diff
            + comps.missing_frac_arm1 * gamma1
            - comps.missing_frac_arm0 * gamma0)


def tipping_point_search(estimate: float, se: float, df: int,
                         comps: BiasComponents, delta_diff: float = 0.0,
                         level: float = 0.95) -> float:
    """Smallest adverse gamma contrast that removes significance.

    The departure is applied against the sign of the estimate along the
    gamma axis that moves it toward zero: gamma1 (rate
    missing_frac_arm1) for nonnegative estimates, gamma0 (rate
    missing_frac_arm0) otherwise, matching a grid scan of that axis.
    Closed form, since the bias is linear:
    gamma* = (|estimate| - t se - selection) / rate, floored at 0.
    Returns infinity when the rate is 0 and the estimate stays
    significant.
    """
    if se <= 0:
        raise ValueError("standard error must be positive")
    if delta_diff < 0:
        raise ValueError("delta contrast is an adverse magnitude; must be >= 0")
    tcrit = t_quantile(1.0 - (1.0 - level) / 2.0, df)
    margin = abs(estimate) - tcrit * se - comps.nonparticipation_fraction * delta_diff
    rate = comps.missing_frac_arm1 if estimate >= 0 else comps.missing_frac_arm0
    if margin <= 0:
        return 0.0
    if rate <= 0:
        return float("inf")
    return margin / rate


def sensitivity_grid(estimate: float, se: float, df: int, comps: BiasComponents,
                     delta_grid, gamma1_grid, gamma0_grid=None,
                     level: float = 0.95):
    """Corrected estimates and significance over a sensitivity grid.

    Each cell subtracts the full arm-specific bias from the estimate;
    a cell is significant when its interval excludes zero with the same
    sign as the uncorrected estimate (a sign reversal does not count as
    the original conclusion surviving). Returns long-format records
    (delta_diff, gamma1, gamma0, bias, corrected_estimate, lower,
    upper, significant).
    """
    if gamma0_grid is None:
        gamma0_grid = [0.0]
    tcrit = t_quantile(1.0 - (1.0 - level) / 2.0, df)
    positive = estimate >= 0
    rows = []
    for dd in delta_grid:
        for g1 in gamma1_grid:
            for g0 in gamma0_grid:
                s = bias_S(comps, dd, g1, g0)
                corrected = estimate - s
                lo, hi = corrected - tcrit * se, corrected + tcrit * se
                significant = bool(lo > 0) if positive else bool(hi < 0)
                rows.append({
                    "delta_diff": float(dd), "gamma1": float(g1),
                    "gamma0": float(g0), "bias": float(s),
                    "corrected_estimate": float(corrected),
                    "lower": float(lo), "upper": float(hi),
                    "significant": significant,
                })
    return rows
