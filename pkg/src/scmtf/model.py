"""Supervised coupled matrix-tensor factorization: parameters and objective.

The objective is

    total = (1 - lam) * (tensor_fit + matrix_fit + l1_weight * L1(A,B,C,D))
            + lam * classifier

with

    tensor_fit = || mask * (T - [w; A,B,C] - bias_feat - bias_pat) ||^2
    matrix_fit = || M - [w; A,D] ||^2
    classifier = mean BCE of the head applied to the training rows of A.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classifier as clf
from .errors import DimensionError, ParameterError
from .tensor_core import FactorSet, coupled_reconstruct, cp_reconstruct

PARAM_BLOCKS = ("w", "A", "B", "C", "D", "b_feat", "b_pat")
FACTOR_BLOCKS = ("A", "B", "C", "D")


@dataclass
class BiasTerms:
    b_feat: np.ndarray  # (J,)
    b_pat: np.ndarray   # (I,)

    def copy(self):
        return BiasTerms(self.b_feat.copy(), self.b_pat.copy())


@dataclass
class ScmtfParams:
    factors: FactorSet
    biases: BiasTerms
    head: clf.ClassifierParams | None = None

    def copy(self):
        return ScmtfParams(self.factors.copy(), self.biases.copy(),
                           None if self.head is None else self.head.copy())

    def block(self, name):
        if name in ("b_feat", "b_pat"):
            return getattr(self.biases, name)
        return getattr(self.factors, name)

    def set_block(self, name, value):
        if name in ("b_feat", "b_pat"):
            setattr(self.biases, name, value)
        else:
            setattr(self.factors, name, value)


@dataclass
class LossBreakdown:
    tensor_fit: float
    matrix_fit: float
    sparsity: float
    classifier: float
    total: float
    lam: float

    @property
    def reconstruction(self):
        return self.tensor_fit + self.matrix_fit + self.sparsity


def bias_tensor_features(b_feat, dims):
    """Tensor of shape ``dims`` with entry (i, j, k) = b_feat[j]."""
    I, J, K = dims
    b_feat = np.asarray(b_feat, dtype=np.float64)
    if b_feat.shape != (J,):
        raise DimensionError(f"b_feat has shape {b_feat.shape}, expected ({J},)")
    return np.broadcast_to(b_feat[None, :, None], (I, J, K)).copy()


def bias_tensor_patients(b_pat, dims):
    """Tensor of shape ``dims`` with entry (i, j, k) = b_pat[i]."""
    I, J, K = dims
    b_pat = np.asarray(b_pat, dtype=np.float64)
    if b_pat.shape != (I,):
        raise DimensionError(f"b_pat has shape {b_pat.shape}, expected ({I},)")
    return np.broadcast_to(b_pat[:, None, None], (I, J, K)).copy()


def sparsity_loss(f: FactorSet) -> float:
    """l1 norm of A, B, C and D (the weights are not penalized)."""
    return float(sum(np.abs(getattr(f, n)).sum() for n in FACTOR_BLOCKS))


def impute(p: ScmtfParams, m=None):
    """Completed tensor: CP reconstruction plus both bias tensors.

    Entries where ``m`` is 0 are the imputations; ``m`` is only used for a
    shape check.
    """
    X = cp_reconstruct(p.factors)
    X += p.biases.b_feat[None, :, None]
    X += p.biases.b_pat[:, None, None]
    if m is not None and np.shape(m) != X.shape:
        raise DimensionError(f"mask shape {np.shape(m)} does not match {X.shape}")
    return X


def _check_shapes(p, data):
    I, J, K, S = p.factors.shape
    if data.tensor.shape != (I, J, K):
        raise DimensionError(f"tensor {data.tensor.shape} vs factors {(I, J, K)}")
    if data.statics.shape != (I, S):
        raise DimensionError(f"statics {data.statics.shape} vs factors {(I, S)}")
    if p.biases.b_feat.shape != (J,) or p.biases.b_pat.shape != (I,):
        raise DimensionError("bias vectors do not match tensor dims")


def _residuals(p, data):
    # unobserved cells are zeroed with where() so their (arbitrary) data
    # values cannot leak into loss or gradient
    R = np.where(data.mask > 0, impute(p) - data.tensor, 0.0)
    Rm = coupled_reconstruct(p.factors) - data.statics
    return R, Rm


def reconstruction_loss(p: ScmtfParams, data, l1_weight=0.0) -> float:
    _check_shapes(p, data)
    R, Rm = _residuals(p, data)
    return float(np.sum(R * R) + np.sum(Rm * Rm) + l1_weight * sparsity_loss(p.factors))


def _classifier_rows(p, data):
    idx = data.train_idx
    return p.factors.A[idx], data.labels[idx], idx


def total_loss(p: ScmtfParams, data, lam, l1_weight=0.0) -> LossBreakdown:
    """Loss value only; see :func:`loss_and_grads` for gradients."""
    lb, _ = _evaluate(p, data, lam, l1_weight, need_grads=False)
    return lb


def loss_and_grads(p: ScmtfParams, data, lam, l1_weight=0.0, include_l1_grad=False,
                   update_stats=False):
    """Loss breakdown and gradients of ``total`` for every parameter block.

    The l1 term is part of the reported loss, but its (sub)gradient is only
    added when ``include_l1_grad`` is set; training applies it through the
    proximal step instead.

    Returns
    -------
    LossBreakdown, dict
        Gradient dict keyed by ``PARAM_BLOCKS`` plus ``"head"`` (a dict keyed
        by the trainable classifier fields, or None).
    """
    return _evaluate(p, data, lam, l1_weight, need_grads=True,
                     include_l1_grad=include_l1_grad, update_stats=update_stats)


def _khatri_rao(X, Y):
    return (X[:, None, :] * Y[None, :, :]).reshape(-1, X.shape[1])


def _evaluate(p, data, lam, l1_weight, need_grads, include_l1_grad=False,
              update_stats=False):
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    _check_shapes(p, data)
    f = p.factors
    if need_grads and f.v is not None:
        raise ParameterError("gradients need the shared-weight form; "
                             "use FactorSet.shared_weight_form() first")
    R, Rm = _residuals(p, data)
    tensor_fit = float(np.sum(R * R))
    matrix_fit = float(np.sum(Rm * Rm))
    sparsity = float(l1_weight * sparsity_loss(f))

    use_head = p.head is not None and data.labels is not None
    cl_loss, head_grads, d_rows = 0.0, None, None
    if use_head:
        rows, labels, idx = _classifier_rows(p, data)
        if need_grads:
            cl_loss, head_grads, d_rows = clf.backward(p.head, rows, labels,
                                                       update_stats=update_stats)
        else:
            logits, _ = clf._train_pass(p.head, clf._check_rows(p.head, rows))
            cl_loss = clf.bce_loss(logits, labels)
    elif lam > 0:
        raise ParameterError("lambda > 0 requires labels and a classifier head")

    total = (1.0 - lam) * (tensor_fit + matrix_fit + sparsity) + lam * cl_loss
    lb = LossBreakdown(tensor_fit, matrix_fit, sparsity, cl_loss, total, lam)
    if not need_grads:
        return lb, None

    I, J, K, _ = f.shape
    scale = 2.0 * (1.0 - lam)
    G = scale * R
    GM = scale * Rm
    MA = G.reshape(I, J * K) @ _khatri_rao(f.B, f.C)
    MB = G.transpose(1, 0, 2).reshape(J, I * K) @ _khatri_rao(f.A, f.C)
    MC = G.transpose(2, 0, 1).reshape(K, I * J) @ _khatri_rao(f.A, f.B)
    MAD = GM @ f.D
    grads = {
        "w": np.sum(f.A * (MA + MAD), axis=0),
        "A": (MA + MAD) * f.w,
        "B": MB * f.w,
        "C": MC * f.w,
        "D": (GM.T @ f.A) * f.w,
        "b_feat": G.sum(axis=(0, 2)),
        "b_pat": G.sum(axis=(1, 2)),
        "head": None,
    }
    if use_head:
        grads["A"][idx] += lam * d_rows
        grads["head"] = {k: lam * v for k, v in head_grads.items()}
    if include_l1_grad and l1_weight:
        for name in FACTOR_BLOCKS:
            grads[name] += (1.0 - lam) * l1_weight * np.sign(getattr(f, name))
    return lb, grads


def normalize_params(p: ScmtfParams) -> ScmtfParams:
    """Column-normalize the factors without changing any model output.

    The head reads raw rows of A, so the removed column norms of A are folded
    into the rows of its first weight matrix.
    """
    from .tensor_core import normalize_columns

    f = normalize_columns(p.factors)
    head = None
    if p.head is not None:
        norms = np.linalg.norm(p.factors.A, axis=0)
        head = p.head.copy()
        head.W1 = head.W1 * norms[:, None]
    return ScmtfParams(f, p.biases.copy(), head)


# -- checkpoint JSON --------------------------------------------------------

def params_to_dict(p: ScmtfParams, normalized=False, **meta):
    I, J, K, S = p.factors.shape
    doc = {
        "format": "scmtf-checkpoint/1",
        "dims": {"I": I, "J": J, "K": K, "S": S},
        "rank": p.factors.rank,
        "normalized": bool(normalized),
        "factors": {n: getattr(p.factors, n).ravel().tolist() for n in ("w", *FACTOR_BLOCKS)},
        "matrix_weights": None if p.factors.v is None else p.factors.v.tolist(),
        "biases": {"b_feat": p.biases.b_feat.tolist(), "b_pat": p.biases.b_pat.tolist()},
        "head": None,
    }
    if p.head is not None:
        doc["head"] = {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in p.head.arrays().items()}
    doc["meta"] = meta
    return doc


def params_from_dict(doc) -> ScmtfParams:
    d = doc["dims"]
    r = doc["rank"]
    fac = doc["factors"]
    shapes = {"A": (d["I"], r), "B": (d["J"], r), "C": (d["K"], r), "D": (d["S"], r)}
    v = doc.get("matrix_weights")
    f = FactorSet(np.array(fac["w"], dtype=np.float64),
                  *(np.array(fac[n], dtype=np.float64).reshape(shapes[n]) for n in FACTOR_BLOCKS),
                  None if v is None else np.array(v, dtype=np.float64))
    b = BiasTerms(np.array(doc["biases"]["b_feat"], dtype=np.float64),
                  np.array(doc["biases"]["b_pat"], dtype=np.float64))
    head = None
    if doc.get("head"):
        head = clf.ClassifierParams(**{
            k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc["head"].items()})
    return ScmtfParams(f, b, head)


def save_checkpoint(path, p: ScmtfParams, normalized=False, **meta):
    Path(path).write_text(json.dumps(params_to_dict(p, normalized, **meta)))


def load_checkpoint(path):
    """Returns ``(params, doc)`` where ``doc`` carries the metadata."""
    doc = json.loads(Path(path).read_text())
    return params_from_dict(doc), doc
