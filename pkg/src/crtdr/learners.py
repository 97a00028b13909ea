"""Built-in regression learners for cross-fitted nuisance estimation.

Five kinds: intercept-only, generalized linear, ridge-regularized
linear, histogram-based regression forest, and k-nearest-neighbor.
An ensemble combines fitted learners with convex weights chosen on a
cluster-level validation split (non-negative least squares, normalized).

All randomness flows through the generator passed in, and every learner
returns a plain callable mapping a feature matrix to predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .nuisance import expit


@dataclass(frozen=True)
class LearnerSpec:
    kind: str                      # intercept | glm | ridge | forest | knn
    params: tuple = ()             # sorted (key, value) pairs

    @staticmethod
    def make(kind, **params):
        return LearnerSpec(kind=kind, params=tuple(sorted(params.items())))

    def get(self, key, default=None):
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class EnsembleSpec:
    learners: tuple
    validation_fraction: float = 0.2


def default_ensemble() -> EnsembleSpec:
    return EnsembleSpec(learners=(
        LearnerSpec.make("glm"),
        LearnerSpec.make("forest", n_trees=25, max_depth=7, min_leaf=10),
    ))


# ---------------------------------------------------------------------------
# parametric learners
# ---------------------------------------------------------------------------

def _with_intercept(X):
    return np.column_stack([np.ones(len(X)), X])


def _ridge_logistic(X1, y, alpha, max_iter=100):
    # ridge keeps the iteration well posed under separation or collinearity
    p = X1.shape[1]
    pen = np.full(p, alpha)
    pen[0] = 0.0
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = np.clip(X1 @ beta, -30.0, 30.0)
        mu = expit(eta)
        w = mu * (1.0 - mu) + 1e-12
        h = (X1 * w[:, None]).T @ X1 + np.diag(pen + 1e-10)
        g = X1.T @ (y - mu) - pen * beta
        step = np.linalg.solve(h, g)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-8:
            break
    return beta


def _fit_linearlike(spec, X, y, binary):
    alpha = float(spec.get("alpha", 1.0)) if spec.kind == "ridge" else 1e-8
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mean) / sd
    X1 = _with_intercept(Xs)
    if binary:
        beta = _ridge_logistic(X1, y, alpha)
        return lambda Xq: expit(np.clip(
            _with_intercept((Xq - mean) / sd) @ beta, -30.0, 30.0))
    pen = np.full(X1.shape[1], alpha)
    pen[0] = 0.0
    beta = np.linalg.solve(X1.T @ X1 + np.diag(pen + 1e-10), X1.T @ y)
    return lambda Xq: _with_intercept((Xq - mean) / sd) @ beta


# ---------------------------------------------------------------------------
# histogram regression forest
# ---------------------------------------------------------------------------

class _Binner:
    def __init__(self, X, n_bins=16):
        self.edges = []
        qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
        for k in range(X.shape[1]):
            e = np.unique(np.quantile(X[:, k], qs))
            self.edges.append(e)

    def transform(self, X):
        out = np.empty(X.shape, dtype=np.int16)
        for k, e in enumerate(self.edges):
            out[:, k] = np.searchsorted(e, X[:, k], side="right")
        return out


def _grow_tree(offset_codes, y, rows, max_depth, min_leaf, k_features, n_bins):
    # offset_codes: (n, k) int64, column j pre-shifted by j * n_bins so a
    # single bincount over the row-raveled node block yields per-feature
    # histograms. Split features are recorded as local column positions.
    feat, thr, left, right, value = [], [], [], [], []

    def new_node():
        feat.append(-1); thr.append(-1); left.append(-1); right.append(-1); value.append(0.0)
        return len(feat) - 1

    stack = [(new_node(), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        ysub = y[idx]
        n_tot = len(idx)
        s_tot = ysub.sum()
        value[node] = s_tot / n_tot
        if depth >= max_depth or n_tot < 2 * min_leaf:
            continue
        sub = offset_codes[idx]
        flat = sub.ravel()
        counts = np.bincount(flat, minlength=k_features * n_bins)
        sums = np.bincount(flat, weights=np.repeat(ysub, k_features),
                           minlength=k_features * n_bins)
        cn = np.cumsum(counts.reshape(k_features, n_bins), axis=1)[:, :-1]
        cs = np.cumsum(sums.reshape(k_features, n_bins), axis=1)[:, :-1]
        nr = n_tot - cn
        valid = (cn >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(valid,
                            cs**2 / np.maximum(cn, 1) + (s_tot - cs)**2 / np.maximum(nr, 1),
                            -np.inf)
        j, t = np.unravel_index(int(np.argmax(gain)), gain.shape)
        if gain[j, t] <= s_tot**2 / n_tot + 1e-12:
            continue
        mask = sub[:, j] <= j * n_bins + t
        li, ri = idx[mask], idx[~mask]
        feat[node] = int(j)
        thr[node] = int(t)
        nl, nr_ = new_node(), new_node()
        left[node] = nl
        right[node] = nr_
        stack.append((nl, li, depth + 1))
        stack.append((nr_, ri, depth + 1))
    return (np.array(feat), np.array(thr), np.array(left), np.array(right),
            np.array(value))


class _Forest:
    def __init__(self, X, y, rng, n_trees, max_depth, min_leaf, max_features, n_bins):
        self.binner = _Binner(X, n_bins)
        codes = self.binner.transform(X).astype(np.int64)
        n, n_features = codes.shape
        k_sub = max(1, int(round(max_features * n_features)))
        shift = np.arange(k_sub, dtype=np.int64) * n_bins
        self.trees = []
        for _ in range(n_trees):
            # feature subset per tree, bootstrap rows per tree
            fsub = np.sort(rng.permutation(n_features)[:k_sub])
            boot = rng.integers(0, n, size=n)
            offset = codes[:, fsub] + shift
            feat, thr, left, right, value = _grow_tree(
                offset, y, boot, max_depth, min_leaf, k_sub, n_bins)
            feat = np.where(feat >= 0, fsub[np.maximum(feat, 0)], -1)
            self.trees.append((feat, thr, left, right, value))

    def predict(self, Xq):
        codes = self.binner.transform(Xq)
        total = np.zeros(len(Xq))
        for feat, thr, left, right, value in self.trees:
            node = np.zeros(len(Xq), dtype=np.int64)
            active = feat[node] >= 0
            while active.any():
                f = feat[node[active]]
                goleft = codes[active.nonzero()[0], f] <= thr[node[active]]
                nxt = np.where(goleft, left[node[active]], right[node[active]])
                node[active.nonzero()[0]] = nxt
                active = feat[node] >= 0
            total += value[node]
        return total / len(self.trees)


# ---------------------------------------------------------------------------
# k nearest neighbors
# ---------------------------------------------------------------------------

class _Knn:
    def __init__(self, X, y, k):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        self.sd = sd
        self.X = (X - self.mean) / sd
        self.y = y
        self.k = min(k, len(y))

    def predict(self, Xq, chunk=512):
        Xq = (Xq - self.mean) / self.sd
        out = np.empty(len(Xq))
        sq_train = np.einsum("ij,ij->i", self.X, self.X)
        for start in range(0, len(Xq), chunk):
            block = Xq[start:start + chunk]
            d2 = sq_train[None, :] - 2.0 * block @ self.X.T
            near = np.argpartition(d2, self.k - 1, axis=1)[:, :self.k]
            out[start:start + chunk] = self.y[near].mean(axis=1)
        return out


# ---------------------------------------------------------------------------
# dispatch and ensemble
# ---------------------------------------------------------------------------

def fit_learner(spec: LearnerSpec, X, y, binary: bool, rng):
    """Fit one learner; returns a callable feature matrix -> predictions."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if spec.kind == "intercept":
        c = float(y.mean())
        return lambda Xq: np.full(len(Xq), c)
    if spec.kind in ("glm", "ridge"):
        return _fit_linearlike(spec, X, y, binary)
    if spec.kind == "forest":
        forest = _Forest(X, y, rng,
                         n_trees=int(spec.get("n_trees", 25)),
                         max_depth=int(spec.get("max_depth", 7)),
                         min_leaf=int(spec.get("min_leaf", 10)),
                         max_features=float(spec.get("max_features", 0.5)),
                         n_bins=int(spec.get("n_bins", 16)))
        if binary:
            return lambda Xq: np.clip(forest.predict(Xq), 0.0, 1.0)
        return forest.predict
    if spec.kind == "knn":
        knn = _Knn(X, y, int(spec.get("k", 10)))
        if binary:
            return lambda Xq: np.clip(knn.predict(Xq), 0.0, 1.0)
        return knn.predict
    raise ValueError(f"unknown learner kind '{spec.kind}'")


def fit_ensemble(spec: EnsembleSpec, X, y, row_clusters, binary, rng):
    """Fit a convex-weighted ensemble with cluster-level validation.

    Clusters among the training rows are split 80/20; learners fitted on
    the 80% side are scored on the 20% side, weights come from
    non-negative least squares (normalized to sum 1, uniform fallback),
    and the final learners are refitted on all training rows.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    specs = spec.learners
    if len(specs) == 1:
        pred = fit_learner(specs[0], X, y, binary, rng)
        return pred, np.array([1.0])
    clusters = np.unique(row_clusters)
    perm = rng.permutation(len(clusters))
    n_val = max(1, int(round(spec.validation_fraction * len(clusters))))
    if n_val >= len(clusters):
        n_val = len(clusters) - 1
    val_clusters = set(clusters[perm[:n_val]])
    val_mask = np.isin(row_clusters, list(val_clusters))
    if val_mask.all() or not val_mask.any():
        weights = np.full(len(specs), 1.0 / len(specs))
    else:
        preds = []
        for ls in specs:
            fitted = fit_learner(ls, X[~val_mask], y[~val_mask], binary, rng)
            preds.append(fitted(X[val_mask]))
        P = np.column_stack(preds)
        w, _ = nnls(P, y[val_mask])
        weights = w / w.sum() if w.sum() > 0 else np.full(len(specs), 1.0 / len(specs))
    fitted_full = [fit_learner(ls, X, y, binary, rng) for ls in specs]

    def predict(Xq):
        out = np.zeros(len(Xq))
        for wgt, f in zip(weights, fitted_full):
            if wgt > 0:
                out += wgt * f(Xq)
        return np.clip(out, 0.0, 1.0) if binary else out

    return predict, weights
