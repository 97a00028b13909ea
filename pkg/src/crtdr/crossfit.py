"""Cluster-level cross-fitting of machine-learned nuisances.

Clusters are partitioned into folds of near-equal size; each fold's
individuals receive predictions from ensembles trained on the other
folds only. Within a training fold, ensembles pick convex weights on a
cluster-level 80/20 validation split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .data import ExpandedDesign
from .learners import EnsembleSpec, default_ensemble, fit_ensemble
from .nuisance import NuisancePredictions


def default_fold_count(m: int) -> int:
    """Largest K <= 5 with at least 10 clusters per fold, else 2."""
    for k in range(5, 1, -1):
        if m / k >= 10:
            return k
    return 2


def partition_clusters(m: int, n_folds: int, seed: int, replicate: int = 0) -> np.ndarray:
    """Deterministic fold labels with sizes differing by at most one."""
    if not 1 <= n_folds <= m:
        raise ValueError(f"fold count {n_folds} invalid for {m} clusters")
    gen = rngmod.substream(seed, replicate=replicate, tag=rngmod.TAG_FOLDS)
    perm = gen.permutation(m)
    fold_ids = np.empty(m, dtype=np.int64)
    fold_ids[perm] = np.arange(m) % n_folds
    return fold_ids


def learner_features(expanded: ExpandedDesign, include_cluster_summaries: bool):
    """Feature matrix for the learners: treatment, expanded covariates,
    and (optionally) their cluster summaries broadcast to individuals."""
    ds = expanded.ds
    idx = ds.cluster_index
    cols = [ds.treatment[idx].astype(float), expanded.values]
    names = ["treatment"] + list(expanded.column_names)
    if include_cluster_summaries:
        cols.append(expanded.cluster_values[idx])
        names += list(expanded.cluster_column_names)
    X = np.column_stack([c if c.ndim == 2 else c[:, None] for c in cols])
    trt_col = 0
    return X, tuple(names), trt_col


@dataclass
class CrossfitResult:
    predictions: NuisancePredictions
    n_folds: int
    kappa_weights: list
    eta_weights: list


def crossfit_nuisances(expanded: ExpandedDesign, outcome_observed,
                       kappa_spec: EnsembleSpec | None = None,
                       eta_spec: EnsembleSpec | None = None,
                       n_folds: int | None = None, seed: int = 0,
                       replicate: int = 0, propensity_floor: float = 0.01,
                       include_cluster_summaries: bool = True) -> CrossfitResult:
    """Cross-fit the missingness propensity and outcome regression.

    Every individual's predictions come from ensembles that never saw
    its cluster. Returns predictions (missingness propensity clipped to
    [floor, 1], outcome regression at both arms) plus fold labels.
    """
    ds = expanded.ds
    m = ds.m
    idx = ds.cluster_index
    if n_folds is None:
        n_folds = default_fold_count(m)
    kappa_spec = kappa_spec or default_ensemble()
    eta_spec = eta_spec or default_ensemble()
    fold_ids = partition_clusters(m, n_folds, seed, replicate)
    X, _, trt_col = learner_features(expanded, include_cluster_summaries)
    r_y = outcome_observed.astype(float)
    y = ds.outcome
    obs = outcome_observed

    kappa = np.empty(ds.n_individuals)
    eta1 = np.empty(ds.n_individuals)
    eta0 = np.empty(ds.n_individuals)
    kw_all, ew_all = [], []
    for k in range(n_folds):
        test_rows = fold_ids[idx] == k
        train_rows = ~test_rows
        gen = rngmod.substream(seed, replicate=replicate, cluster=k,
                               tag=rngmod.TAG_LEARNER)
        kap_fn, kw = fit_ensemble(kappa_spec, X[train_rows], r_y[train_rows],
                                  idx[train_rows], binary=True, rng=gen)
        fit_rows = train_rows & obs
        eta_fn, ew = fit_ensemble(eta_spec, X[fit_rows], y[fit_rows],
                                  idx[fit_rows], binary=False, rng=gen)
        Xt = X[test_rows]
        kappa[test_rows] = np.clip(kap_fn(Xt), propensity_floor, 1.0)
        X1 = Xt.copy()
        X1[:, trt_col] = 1.0
        eta1[test_rows] = eta_fn(X1)
        X1[:, trt_col] = 0.0
        eta0[test_rows] = eta_fn(X1)
        kw_all.append(kw)
        ew_all.append(ew)

    preds = NuisancePredictions(kappa=kappa, eta1=eta1, eta0=eta0,
                                pi_cluster=np.full(m, ds.pi),
                                fold_ids=fold_ids)
    return CrossfitResult(predictions=preds, n_folds=n_folds,
                          kappa_weights=kw_all, eta_weights=ew_all)
