"""Random forest of Gini CART trees with impurity-based feature importance.

Used on the membership matrix A to score phenotypes. Binary labels only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, ParameterError


@dataclass
class ForestConfig:
    n_trees: int = 200
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise ParameterError("min_samples_split must be >= 2")


@dataclass
class Tree:
    feature: np.ndarray     # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # fraction of class 1 at the node

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}


@dataclass
class ForestModel:
    trees: list
    importances: np.ndarray
    n_features: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def to_dict(self):
        return {"n_features": self.n_features, "importances": self.importances.tolist(),
                "trees": [t.to_dict() for t in self.trees]}


def _gini(pos, n):
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(x, y):
    """Best threshold on one feature; returns (impurity decrease * n, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = ys.size
    # candidate cut after position i (left = first i+1 samples) where values differ
    valid = np.flatnonzero(xs[1:] > xs[:-1])
    if valid.size == 0:
        return None
    cum = np.cumsum(ys)
    n_left = valid + 1.0
    pos_left = cum[valid]
    n_right = n - n_left
    pos_right = cum[-1] - pos_left
    child = n_left * _gini(pos_left, n_left) + n_right * _gini(pos_right, n_right)
    best = np.argmin(child)
    gain = n * _gini(cum[-1], n) - child[best]
    i = valid[best]
    return gain, 0.5 * (xs[i] + xs[i + 1])


def _grow_tree(X, y, cfg, rng, n_total, importance):
    n_feat = X.shape[1]
    k = max(1, int(np.sqrt(n_feat)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(yy):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(yy.mean()))
        return len(feature) - 1

    root = new_node(y)
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yy = y[idx]
        pos = yy.sum()
        if (idx.size < cfg.min_samples_split or pos == 0 or pos == idx.size
                or (cfg.max_depth is not None and depth >= cfg.max_depth)):
            continue
        best, seen = None, 0
        # examine k splittable features; features constant on this node do not count
        for f in rng.permutation(n_feat):
            res = _best_split(X[idx, f], yy)
            if res is None:
                continue
            seen += 1
            if best is None or res[0] > best[0]:
                best = (res[0], res[1], f)
            if seen == k:
                break
        if best is None:
            continue
        gain, thr, f = best
        mask = X[idx, f] <= thr
        importance[f] += gain / n_total
        feature[node], threshold[node] = int(f), float(thr)
        l_idx, r_idx = idx[mask], idx[~mask]
        left[node] = new_node(y[l_idx])
        right[node] = new_node(y[r_idx])
        stack.append((right[node], r_idx, depth + 1))
        stack.append((left[node], l_idx, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value))


def _check_xy(rows, labels=None):
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"rows must be 2-D, got shape {X.shape}")
    if labels is None:
        return X
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be binary (0/1)")
    return X, y


def fit(rows, labels, cfg: ForestConfig | None = None) -> ForestModel:
    """Grow ``cfg.n_trees`` Gini trees, each on a bootstrap sample.

    Each split considers ``floor(sqrt(n_features))`` randomly drawn features.
    Feature importances are the impurity decreases per feature (weighted by
    node size), normalized per tree, averaged and renormalized to sum to 1.
    With single-class labels every tree is a single leaf and all importances
    are 0.
    """
    cfg = cfg or ForestConfig()
    X, y = _check_xy(rows, labels)
    if X.shape[0] < cfg.min_samples_split:
        raise InputError(f"need at least {cfg.min_samples_split} rows, got {X.shape[0]}")
    n, n_feat = X.shape
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees = []
    total_imp = np.zeros(n_feat)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        imp = np.zeros(n_feat)
        trees.append(_grow_tree(X[idx], y[idx], cfg, rng, idx.size, imp))
        if imp.sum() > 0:
            total_imp += imp / imp.sum()
    if total_imp.sum() > 0:
        total_imp /= total_imp.sum()
    return ForestModel(trees, total_imp, n_feat, cfg)


def predict_proba(model: ForestModel, rows):
    """Class-1 probability: mean over trees of the leaf's class-1 fraction."""
    X = _check_xy(rows)
    if X.shape[1] != model.n_features:
        raise DimensionError(f"model has {model.n_features} features, rows have {X.shape[1]}")
    return np.mean([t.predict_proba(X) for t in model.trees], axis=0)


def top_phenotypes(model: ForestModel, threshold=0.10):
    """Feature indices with importance >= threshold (and > 0), most important first."""
    imp = model.importances
    keep = np.flatnonzero((imp >= threshold) & (imp > 0))
    return keep[np.argsort(-imp[keep], kind="stable")].tolist()
