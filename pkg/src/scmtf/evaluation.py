"""Scoring helpers: imputation holdouts, factor recovery, classification metrics."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import binomtest
from sklearn import metrics

from .errors import DimensionError, ParameterError
from .tensor_core import FactorSet


def holdout_split(mask, fraction=0.05, seed=0):
    """Remove a random ``fraction`` of observed cells from ``mask``.

    Returns ``(train_mask, holdout_mask)``; the two are disjoint and their
    sum is ``mask``.
    """
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"holdout fraction must lie in [0, 1), got {fraction}")
    mask = np.asarray(mask, dtype=np.float64)
    obs = np.flatnonzero(mask.ravel() > 0)
    n_hold = int(round(fraction * obs.size))
    rng = np.random.default_rng(seed)
    held = rng.choice(obs, size=n_hold, replace=False)
    holdout = np.zeros(mask.size)
    holdout[held] = 1.0
    holdout = holdout.reshape(mask.shape)
    return mask - holdout, holdout


def imputation_errors(truth, imputed, holdout):
    """MAE and RMSE over cells where ``holdout`` is 1."""
    sel = np.asarray(holdout) > 0
    n = int(sel.sum())
    if n == 0:
        return {"mae": float("nan"), "rmse": float("nan"), "n": 0}
    diff = np.asarray(imputed)[sel] - np.asarray(truth)[sel]
    return {"mae": float(np.mean(np.abs(diff))), "rmse": float(np.sqrt(np.mean(diff ** 2))), "n": n}


def _unit_columns(M):
    norms = np.linalg.norm(M, axis=0)
    return M / np.where(norms == 0, 1.0, norms)


def factor_congruence(est: FactorSet, true: FactorSet, modes="ABCD"):
    """Best-permutation congruence between estimated and planted components.

    The congruence of a component pair is the product over ``modes`` of the
    cosine similarities of the matching factor columns. Components are
    matched with the Hungarian algorithm.

    Returns
    -------
    mean_score : float
    per_component : ndarray
        Score of each planted component under the best matching.
    perm : ndarray
        ``perm[s]`` is the estimated component matched to planted ``s``
        (``-1`` when the estimate has fewer components).
    """
    score = np.ones((true.rank, est.rank))
    for m in modes:
        score *= _unit_columns(getattr(true, m)).T @ _unit_columns(getattr(est, m))
    rows, cols = linear_sum_assignment(-score)
    perm = np.full(true.rank, -1)
    perm[rows] = cols
    per = np.zeros(true.rank)
    per[rows] = score[rows, cols]
    return float(per.mean()), per, perm


def relative_error(approx, target, mask=None):
    approx, target = np.asarray(approx), np.asarray(target)
    if mask is not None:
        sel = np.asarray(mask) > 0
        approx, target = approx[sel], target[sel]
    return float(np.linalg.norm(approx - target) / np.linalg.norm(target))


def binary_metrics(y_true, scores, threshold=0.5):
    """AUC, F1, precision and recall for one binary outcome."""
    y_true = np.asarray(y_true).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape != scores.shape:
        raise DimensionError(f"labels {y_true.shape} vs scores {scores.shape}")
    pred = (scores >= threshold).astype(int)
    auc = (metrics.roc_auc_score(y_true, scores) if len(np.unique(y_true)) == 2
           else float("nan"))
    return {
        "auc": float(auc),
        "f1": float(metrics.f1_score(y_true, pred, zero_division=0)),
        "precision": float(metrics.precision_score(y_true, pred, zero_division=0)),
        "recall": float(metrics.recall_score(y_true, pred, zero_division=0)),
    }


def outcome_metrics(labels, probs, names=("persist_yr2", "persist_yr3")):
    """:func:`binary_metrics` for each outcome column."""
    labels, probs = np.asarray(labels), np.asarray(probs)
    return {name: binary_metrics(labels[:, o], probs[:, o]) for o, name in enumerate(names)}


def sign_test(diffs):
    """One-sided sign test that paired differences are positive (zeros dropped)."""
    diffs = np.asarray(diffs)
    nz = diffs[diffs != 0]
    k = int(np.sum(nz > 0))
    if nz.size == 0:
        return 1.0
    return float(binomtest(k, nz.size, 0.5, alternative="greater").pvalue)
