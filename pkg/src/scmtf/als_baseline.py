"""Block-alternating comparison model.

Same objective and constraints as the all-at-once model, but the factor
blocks are updated one at a time by gradient steps (A -> B -> C -> D -> w,
then the biases when enabled) and the classifier is a logistic regression
refit on A after every outer iteration. Its loss is added to the recorded
total but never back-propagated into A.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .classifier import check_labels
from .errors import DivergenceError, ParameterError
from .model import BiasTerms, LossBreakdown, ScmtfParams, loss_and_grads, normalize_params
from .optimizer import AdamState, TrainHistory, adam_step, init_params, prox_l1_nonneg, schedule_tick

BLOCK_ORDER = ("A", "B", "C", "D", "w")


@dataclass
class AlsConfig:
    rank: int = 28
    lam: float = 0.7
    lr: float = 0.01
    l1_weight: float = 0.001
    outer_iters: int = 100
    # 5 blocks x 10 inner steps ~ 50 all-at-once steps per outer iteration
    inner_steps: int = 10
    use_bias: bool = False
    seed: int = 0
    decay_factor: float = 0.8
    decay_every: int = 1000
    logreg_steps: int = 500
    # restart the block's Adam moments at every visit, so each block
    # subproblem is solved from scratch like a classic ALS sweep
    fresh_moments: bool = True

    def __post_init__(self):
        if self.rank < 1 or self.outer_iters < 1 or self.inner_steps < 1:
            raise ParameterError("rank, outer_iters and inner_steps must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def method(self):
        return "als_bias" if self.use_bias else "als"


@dataclass
class LogRegParams:
    weights: np.ndarray     # (r, 2)
    intercepts: np.ndarray  # (2,)

    def predict_proba(self, rows):
        return expit(np.asarray(rows) @ self.weights + self.intercepts)


def _logreg_objective(theta, X, y):
    z = X @ theta[:-1] + theta[-1]
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    g = (expit(z) - y) / y.size
    return loss, np.append(X.T @ g, g.sum())


def logreg_loss(params: LogRegParams, rows, labels):
    """Mean BCE over all label cells, matching the head's loss convention."""
    z = np.asarray(rows) @ params.weights + params.intercepts
    return float(np.mean(np.logaddexp(0.0, z) - labels * z))


def logreg_gradient(params: LogRegParams, rows, labels):
    """Gradient of the per-outcome mean BCE; returns ``(d_weights, d_intercepts)``."""
    rows = np.asarray(rows)
    g = (expit(rows @ params.weights + params.intercepts) - labels) / rows.shape[0]
    return rows.T @ g, g.sum(axis=0)


def fit_logreg(rows, labels, steps=500, gtol=1e-6, warm: LogRegParams | None = None):
    """Unregularized per-outcome logistic regression (L-BFGS).

    Stops when the gradient norm drops below ``gtol`` or after ``steps``
    iterations. A single-class outcome column is fitted anyway: the intercept
    drifts towards +/-inf until the step cap.
    """
    rows = np.asarray(rows, dtype=np.float64)
    labels = check_labels(labels)
    if rows.shape[0] < 2:
        raise ParameterError("logistic regression needs >= 2 rows")
    r = rows.shape[1]
    W = np.zeros((r, labels.shape[1]))
    b = np.zeros(labels.shape[1])
    for o in range(labels.shape[1]):
        theta0 = (np.zeros(r + 1) if warm is None
                  else np.append(warm.weights[:, o], warm.intercepts[o]))
        res = minimize(_logreg_objective, theta0, args=(rows, labels[:, o]), jac=True,
                       method="L-BFGS-B", options={"maxiter": steps, "gtol": gtol, "ftol": 0.0})
        W[:, o], b[o] = res.x[:-1], res.x[-1]
    return LogRegParams(W, b)


def _project_block(p, name, lr, l1_weight):
    value = p.block(name)
    if name in ("A", "B", "C", "D"):
        p.set_block(name, prox_l1_nonneg(value, lr * l1_weight))
    elif name == "w":
        p.set_block(name, np.maximum(value, 0.0))


def train_als(data, cfg: AlsConfig, callback=None):
    """Fit the block-alternating baseline.

    Returns
    -------
    params : ScmtfParams
        Column-normalized factors; ``head`` is None.
    history : TrainHistory
        One record per inner block step, tagged with ``cfg.method``.
    logreg : LogRegParams or None
        Classifier from the last outer iteration (None without labels).
    """
    I, J, K = data.dims
    S = data.statics.shape[1]
    p = init_params((I, J, K, S), cfg.rank, cfg.seed, with_head=False)
    if not cfg.use_bias:
        p.biases = BiasTerms(np.zeros(J), np.zeros(I))
    # one bias block: both vectors move together
    groups = [(b,) for b in BLOCK_ORDER] + ([("b_feat", "b_pat")] if cfg.use_bias else [])
    adam = {g: AdamState(cfg.lr, factor=cfg.decay_factor, every=cfg.decay_every) for g in groups}

    has_labels = data.labels is not None and cfg.lam > 0
    idx = data.train_idx
    hist = TrainHistory(method=cfg.method)
    logreg, cl_loss = None, 0.0
    step = 0
    last_finite = None
    for _ in range(cfg.outer_iters):
        for group in groups:
            if cfg.fresh_moments:
                st = adam[group]
                st.m, st.v, st.t = {}, {}, 0
            for _ in range(cfg.inner_steps):
                t0 = time.perf_counter()
                lb, grads = loss_and_grads(p, data, 0.0, cfg.l1_weight)
                total = (1.0 - cfg.lam) * lb.total + cfg.lam * cl_loss
                if not np.isfinite(total):
                    raise DivergenceError(step, last_finite)
                last_finite = total
                state = adam[group]
                scaled = {n: (1.0 - cfg.lam) * grads[n] for n in group}
                new = adam_step(state, {n: p.block(n) for n in group}, scaled)
                for n, value in new.items():
                    p.set_block(n, value)
                    _project_block(p, n, state.lr, cfg.l1_weight)
                rec = LossBreakdown(lb.tensor_fit, lb.matrix_fit, lb.sparsity, cl_loss, total, cfg.lam)
                hist.add(rec, state.lr, time.perf_counter() - t0)
                if callback is not None:
                    callback(step, p, rec, group)
                step += 1
                for st in adam.values():
                    schedule_tick(st, step)
        if has_labels:
            rows = p.factors.A[idx]
            logreg = fit_logreg(rows, data.labels[idx], cfg.logreg_steps, warm=logreg)
            cl_loss = logreg_loss(logreg, rows, data.labels[idx])
    hist.reason = "max_steps"
    if logreg is not None:
        # the regression reads raw rows of A; keep it valid for normalized A
        norms = np.linalg.norm(p.factors.A, axis=0)
        logreg = LogRegParams(logreg.weights * norms[:, None], logreg.intercepts.copy())
    return normalize_params(p), hist, logreg
