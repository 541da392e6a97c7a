"""Two-layer classifier head trained on rows of the membership matrix.

Architecture: linear(r -> 10) -> batch norm -> ReLU -> linear(10 -> 2), one
sigmoid output per binary outcome.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatchError, DimensionError, InputError

HIDDEN = 10
N_OUTCOMES = 2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ClassifierParams:
    W1: np.ndarray            # (r, 10)
    b1: np.ndarray            # (10,)
    bn_gamma: np.ndarray      # (10,)
    bn_beta: np.ndarray       # (10,)
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    W2: np.ndarray            # (10, 2)
    b2: np.ndarray            # (2,)

    TRAINABLE = ("W1", "b1", "bn_gamma", "bn_beta", "W2", "b2")

    @property
    def n_inputs(self):
        return self.W1.shape[0]

    def copy(self):
        return ClassifierParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_classifier(n_inputs, rng, hidden=HIDDEN, n_out=N_OUTCOMES):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; gamma=1, beta=0."""
    lim1 = 1.0 / np.sqrt(n_inputs)
    lim2 = 1.0 / np.sqrt(hidden)
    return ClassifierParams(
        W1=rng.uniform(-lim1, lim1, size=(n_inputs, hidden)),
        b1=rng.uniform(-lim1, lim1, size=hidden),
        bn_gamma=np.ones(hidden),
        bn_beta=np.zeros(hidden),
        bn_running_mean=np.zeros(hidden),
        bn_running_var=np.ones(hidden),
        W2=rng.uniform(-lim2, lim2, size=(hidden, n_out)),
        b2=rng.uniform(-lim2, lim2, size=n_out),
    )


def _check_rows(params, rows):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != params.n_inputs:
        raise DimensionError(
            f"rows must have shape (n, {params.n_inputs}), got {rows.shape}")
    return rows


def _train_pass(params, rows):
    n = rows.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"train-mode batch norm needs >= 2 rows, got {n}")
    h = rows @ params.W1 + params.b1
    mu = h.mean(axis=0)
    var = h.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mu) * inv_std
    y = params.bn_gamma * xhat + params.bn_beta
    a = np.maximum(y, 0.0)
    logits = a @ params.W2 + params.b2
    cache = dict(h=h, mu=mu, var=var, inv_std=inv_std, xhat=xhat, y=y, a=a)
    return logits, cache


def _update_running(params, mu, var, n):
    # running variance tracks the unbiased estimate
    unbiased = var * n / (n - 1)
    params.bn_running_mean = (1 - BN_MOMENTUM) * params.bn_running_mean + BN_MOMENTUM * mu
    params.bn_running_var = (1 - BN_MOMENTUM) * params.bn_running_var + BN_MOMENTUM * unbiased


def forward(params: ClassifierParams, rows, mode="eval"):
    """Logits of shape (n, 2).

    ``mode="train"`` normalizes with batch statistics and updates the running
    statistics in place; ``mode="eval"`` uses the running statistics and does
    not modify ``params``.
    """
    rows = _check_rows(params, rows)
    if mode == "train":
        logits, cache = _train_pass(params, rows)
        _update_running(params, cache["mu"], cache["var"], rows.shape[0])
        return logits
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = rows @ params.W1 + params.b1
    xhat = (h - params.bn_running_mean) / np.sqrt(params.bn_running_var + BN_EPS)
    a = np.maximum(params.bn_gamma * xhat + params.bn_beta, 0.0)
    return a @ params.W2 + params.b2


def hidden_preactivations(params, rows):
    """Train-mode normalized hidden units before gamma/beta (for diagnostics)."""
    _, cache = _train_pass(params, _check_rows(params, rows))
    return cache["xhat"]


def check_labels(labels):
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("labels must be binary (0/1)")
    return labels


def bce_loss(logits, labels) -> float:
    """Mean binary cross-entropy with logits over all label cells."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = check_labels(labels)
    if logits.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    # log(1 + e^z) - y z, overflow-free for large |z|
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def predict_proba(params, rows):
    return expit(forward(params, rows, mode="eval"))


def backward(params: ClassifierParams, rows, labels, update_stats=False):
    """Loss and exact gradients of ``bce_loss(forward(rows, "train"), labels)``.

    Returns
    -------
    loss : float
    grads : dict
        Gradient for every trainable field of ``params``.
    d_rows : ndarray, shape like ``rows``
        Gradient with respect to the input rows.
    """
    rows = _check_rows(params, rows)
    labels = check_labels(labels)
    logits, c = _train_pass(params, rows)
    if logits.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
    n = rows.shape[0]

    d_logits = (expit(logits) - labels) / labels.size
    grads = {"W2": c["a"].T @ d_logits, "b2": d_logits.sum(axis=0)}
    d_a = d_logits @ params.W2.T
    d_y = d_a * (c["y"] > 0)
    grads["bn_gamma"] = np.sum(d_y * c["xhat"], axis=0)
    grads["bn_beta"] = d_y.sum(axis=0)
    d_xhat = d_y * params.bn_gamma
    # batch-norm backward with batch statistics
    d_h = (c["inv_std"] / n) * (
        n * d_xhat - d_xhat.sum(axis=0) - c["xhat"] * np.sum(d_xhat * c["xhat"], axis=0))
    grads["W1"] = rows.T @ d_h
    grads["b1"] = d_h.sum(axis=0)
    d_rows = d_h @ params.W1.T

    if update_stats:
        _update_running(params, c["mu"], c["var"], n)
    return loss, grads, d_rows
