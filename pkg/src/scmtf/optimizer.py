"""All-at-once projected/proximal gradient training.

Each step: evaluate the loss and all gradients, take an Adam step on the
decomposition and bias blocks and a plain SGD step on the classifier head,
soft-threshold and project A, B, C, D onto the nonnegative orthant, clamp w,
then advance the step-decay schedule.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import classifier as clf
from .errors import DimensionError, DivergenceError, ParameterError
from .model import FACTOR_BLOCKS, PARAM_BLOCKS, BiasTerms, LossBreakdown, ScmtfParams, loss_and_grads, normalize_params
from .tensor_core import FactorSet


def scheduled_lr(base_lr, step, factor=0.8, every=1000):
    """Step-decay learning rate: ``base_lr * factor ** (step // every)``."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    return base_lr * factor ** (step // every)


class AdamState:
    """Adam moments for a dict of named parameter blocks."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, factor=0.8, every=1000):
        self.base_lr = lr
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.factor = factor
        self.every = every
        self.t = 0
        self.m = {}
        self.v = {}


@dataclass
class SgdState:
    lr: float
    base_lr: float = None
    factor: float = 0.8
    every: int = 1000

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("SGD learning rate must be > 0")
        if self.base_lr is None:
            self.base_lr = self.lr


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update of every block in ``params``.

    Returns new arrays; ``state.t`` advances by one per call.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, value in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(value):
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, "
                                 f"parameter has {np.shape(value)}")
        m = state.m.get(name, 0.0)
        v = state.v.get(name, 0.0)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


def sgd_step(state: SgdState, params: dict, grads: dict) -> dict:
    return {name: value - state.lr * grads[name] for name, value in params.items()}


def schedule_tick(state, global_step):
    """Set ``state.lr`` for ``global_step`` from its base rate; returns it."""
    state.lr = scheduled_lr(state.base_lr, global_step, state.factor, state.every)
    return state.lr


def prox_l1_nonneg(X, threshold):
    """Soft-threshold then project onto ``u >= 0``: ``max(x - threshold, 0)``."""
    if threshold < 0:
        raise ParameterError(f"threshold must be >= 0, got {threshold}")
    return np.maximum(np.asarray(X, dtype=np.float64) - threshold, 0.0)


@dataclass
class TrainConfig:
    rank: int = 28
    lam: float = 0.7
    lr: float = 0.01
    l1_weight: float = 0.001
    max_steps: int = 5000
    seed: int = 0
    decay_factor: float = 0.8
    decay_every: int = 1000
    tol: float = 1e-7
    window: int = 100
    # classifier-head SGD rate; None means "same as lr"
    head_lr: float | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError("rank must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lr <= 0 or self.l1_weight < 0 or self.max_steps < 1:
            raise ParameterError("need lr > 0, l1_weight >= 0, max_steps >= 1")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    n_steps: int = 0
    reason: str = ""
    method: str = "all_at_once"

    def add(self, lb: LossBreakdown, lr, seconds):
        self.records.append(lb)
        self.lrs.append(lr)
        self.seconds.append(seconds)
        self.n_steps += 1

    @property
    def totals(self):
        return np.array([r.total for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "tensor_fit", "matrix_fit", "sparsity", "classifier", "total", "lr"])
            for step, (r, lr) in enumerate(zip(self.records, self.lrs)):
                w.writerow([step, *(repr(x) for x in (r.tensor_fit, r.matrix_fit, r.sparsity,
                                                      r.classifier, r.total, lr))])


def init_params(dims, rank, seed, with_head=True) -> ScmtfParams:
    """Random starting point.

    Factors and both bias vectors are Uniform[0, 1], ``w`` is all ones and the
    head uses :func:`scmtf.classifier.init_classifier`.

    Parameters
    ----------
    dims : tuple
        ``(I, J, K, S)``.
    """
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    I, J, K, S = dims
    rng = np.random.default_rng(seed)
    f = FactorSet(np.ones(rank), rng.random((I, rank)), rng.random((J, rank)),
                  rng.random((K, rank)), rng.random((S, rank)))
    b = BiasTerms(rng.random(J), rng.random(I))
    head = clf.init_classifier(rank, rng) if with_head else None
    return ScmtfParams(f, b, head)


def converged(totals, window, tol):
    """Relative improvement over the last ``window`` steps fell below ``tol``."""
    if len(totals) <= window:
        return False
    old, new = totals[-window - 1], totals[-1]
    return (old - new) / max(abs(old), 1e-300) < tol


def project_step(p: ScmtfParams, lr, l1_weight):
    """Proximal l1 + nonnegativity on A..D, clamp on w (in place)."""
    thr = lr * l1_weight
    for name in FACTOR_BLOCKS:
        setattr(p.factors, name, prox_l1_nonneg(getattr(p.factors, name), thr))
    p.factors.w = np.maximum(p.factors.w, 0.0)


def train(data, cfg: TrainConfig, init: ScmtfParams | None = None, callback=None):
    """Fit the supervised coupled factorization on ``data``.

    The classifier term uses only ``data.train_idx`` rows. Losses and
    gradients use only cells where ``data.mask`` is 1, so holdout cells must
    already be removed from the mask.

    Parameters
    ----------
    callback : callable, optional
        Called as ``callback(step, params, loss_breakdown)`` after each step's
        projection.

    Returns
    -------
    params : ScmtfParams
        Column-normalized final parameters.
    history : TrainHistory
    """
    I, J, K = data.dims
    S = data.statics.shape[1]
    use_head = data.labels is not None
    if cfg.lam > 0 and not use_head:
        raise ParameterError("lambda > 0 requires labels")
    if init is not None:
        p = init.copy()
        p.factors = p.factors.shared_weight_form()
    else:
        p = init_params((I, J, K, S), cfg.rank, cfg.seed, use_head)
    adam = AdamState(cfg.lr, factor=cfg.decay_factor, every=cfg.decay_every)
    sgd = SgdState(cfg.head_lr or cfg.lr, factor=cfg.decay_factor, every=cfg.decay_every)
    hist = TrainHistory()
    totals = []
    last_finite = None

    for step in range(cfg.max_steps):
        t0 = time.perf_counter()
        lb, grads = loss_and_grads(p, data, cfg.lam, cfg.l1_weight, update_stats=True)
        if not np.isfinite(lb.total) or not all(
                np.all(np.isfinite(grads[n])) for n in PARAM_BLOCKS):
            raise DivergenceError(step, last_finite)
        last_finite = lb.total

        new = adam_step(adam, {n: p.block(n) for n in PARAM_BLOCKS}, grads)
        for n, value in new.items():
            p.set_block(n, value)
        if p.head is not None and grads["head"] is not None:
            upd = sgd_step(sgd, {k: getattr(p.head, k) for k in p.head.TRAINABLE}, grads["head"])
            for k, value in upd.items():
                setattr(p.head, k, value)
        project_step(p, adam.lr, cfg.l1_weight)

        hist.add(lb, adam.lr, time.perf_counter() - t0)
        totals.append(lb.total)
        if callback is not None:
            callback(step, p, lb)
        schedule_tick(adam, step + 1)
        schedule_tick(sgd, step + 1)
        if converged(totals, cfg.window, cfg.tol):
            hist.reason = "converged"
            break
    else:
        hist.reason = "max_steps"
    return normalize_params(p), hist


def config_dict(cfg):
    return asdict(cfg)
