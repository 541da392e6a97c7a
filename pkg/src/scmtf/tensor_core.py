"""Dense tensor/matrix containers and CP algebra.

Tensors are plain ``float64`` numpy arrays. A 3-way tensor has shape
``(I, J, K)`` = (patients, temporal features, timepoints) and is stored in
C order, i.e. patient-major, then feature, then time (time varies fastest).
All readers and writers in this package use that layout.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InputError

LAYOUT = "C:patient,feature,time"


def as_dense3(values, name="tensor"):
    """Validate and return a finite float64 3-way array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise DimensionError(f"{name} must be 3-way, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def as_dense2(values, name="matrix"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-way, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def as_mask3(values, shape=None):
    """Validate a binary mask, optionally against the tensor shape it masks."""
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise DimensionError(f"mask must be 3-way, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"mask shape {arr.shape} does not match {tuple(shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InputError("mask entries must be 0 or 1")
    return arr.astype(np.float64)


@dataclass
class FactorSet:
    """Weighted coupled CP factors.

    Parameters
    ----------
    w : ndarray, shape (r,)
        Component weights.
    A : ndarray, shape (I, r)
        Patient-phenotype memberships.
    B : ndarray, shape (J, r)
        Temporal feature loadings.
    C : ndarray, shape (K, r)
        Temporal patterns.
    D : ndarray, shape (S, r)
        Static feature loadings.
    v : ndarray, shape (r,), optional
        Separate weights for the static-matrix term. ``None`` (the training
        parameterization) means the matrix shares ``w``. Column normalization
        fills it in, because one shared weight cannot absorb the norms of both
        the B, C columns (tensor only) and the D columns (matrix only).
    """

    w: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    v: np.ndarray | None = None
    rank: int = field(init=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
            if self.v.shape != self.w.shape:
                raise DimensionError(f"v has shape {self.v.shape}, w has {self.w.shape}")
        for name in "ABCD":
            mat = np.asarray(getattr(self, name), dtype=np.float64)
            if mat.ndim != 2:
                raise DimensionError(f"factor {name} must be 2-D, got shape {mat.shape}")
            setattr(self, name, mat)
        self.rank = self.w.shape[0]
        for name in "ABCD":
            cols = getattr(self, name).shape[1]
            if cols != self.rank:
                raise DimensionError(
                    f"factor {name} has {cols} columns but w has length {self.rank}")

    @property
    def shape(self):
        """(I, J, K, S)."""
        return self.A.shape[0], self.B.shape[0], self.C.shape[0], self.D.shape[0]

    @property
    def matrix_weights(self):
        return self.w if self.v is None else self.v

    def copy(self):
        return FactorSet(self.w.copy(), self.A.copy(), self.B.copy(), self.C.copy(),
                         self.D.copy(), None if self.v is None else self.v.copy())

    def is_nonnegative(self):
        return all(np.min(m, initial=0.0) >= 0
                   for m in (self.w, self.matrix_weights, self.A, self.B, self.C, self.D))

    def permuted(self, perm):
        """Reorder components; ``perm[s]`` is the old index of new component ``s``."""
        perm = np.asarray(perm)
        return FactorSet(self.w[perm], self.A[:, perm], self.B[:, perm], self.C[:, perm],
                         self.D[:, perm], None if self.v is None else self.v[perm])

    def shared_weight_form(self):
        """Equivalent factors with ``v`` folded into D, so one weight vector serves both terms."""
        if self.v is None:
            return self.copy()
        lost = (self.w == 0) & (self.v != 0) & np.any(self.D != 0, axis=0)
        if lost.any():
            raise ValueError(f"components {np.flatnonzero(lost).tolist()} have zero tensor weight "
                             "but nonzero matrix weight; no shared-weight form exists")
        ratio = np.divide(self.v, self.w, out=np.zeros_like(self.v), where=self.w != 0)
        return FactorSet(self.w.copy(), self.A.copy(), self.B.copy(), self.C.copy(),
                         self.D * ratio)


def cp_reconstruct(f: FactorSet) -> np.ndarray:
    """Full tensor with entries ``sum_s w_s A[i,s] B[j,s] C[k,s]``."""
    return np.einsum("s,is,js,ks->ijk", f.w, f.A, f.B, f.C, optimize=True)


def coupled_reconstruct(f: FactorSet) -> np.ndarray:
    """Static-matrix approximation ``(A * w) @ D.T`` (``v`` replaces ``w`` when set)."""
    return (f.A * f.matrix_weights) @ f.D.T


def normalize_columns(f: FactorSet) -> FactorSet:
    """Rescale every factor column to unit norm, moving the scale into the weights.

    ``w`` absorbs the norms of the A, B, C columns and ``v`` those of the A, D
    columns, so both reconstructions are unchanged. A column that is
    identically zero stays zero and zeroes the weights it enters.
    """
    mats, scale = {}, {}
    for name in "ABCD":
        mat = getattr(f, name)
        norms = np.linalg.norm(mat, axis=0)
        zero = norms == 0
        mats[name] = mat / np.where(zero, 1.0, norms)
        scale[name] = np.where(zero, 0.0, norms)
    w = f.w * scale["A"] * scale["B"] * scale["C"]
    v = f.matrix_weights * scale["A"] * scale["D"]
    return FactorSet(w, mats["A"], mats["B"], mats["C"], mats["D"], v)


def phenotype_weights(f: FactorSet):
    """Overall size of each component: ``sqrt(w_s * v_s)`` of the normalized factors.

    With unit columns, ``w`` and ``v`` are fixed by the two reconstructions,
    so their geometric mean does not depend on how the raw columns were
    scaled. For shared-weight factors this is
    ``w_s ||a_s|| sqrt(||b_s|| ||c_s|| ||d_s||)``.
    """
    g = normalize_columns(f)
    return np.sqrt(g.w * g.matrix_weights)


def masked_sq_error(t, r, m) -> float:
    """Sum of squared residuals over observed (mask 1) cells."""
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if not (t.shape == r.shape == m.shape):
        raise DimensionError(f"shape mismatch: {t.shape}, {r.shape}, {m.shape}")
    # where() rather than multiply: unobserved cells must contribute exactly 0
    diff = np.where(m > 0, t - r, 0.0)
    return float(np.sum(diff * diff))


# -- serialization ----------------------------------------------------------

def save_long_csv(path, arr, mask=None):
    """Write a 2- or 3-way array as ``i,j[,k],value`` rows.

    When ``mask`` is given only observed cells are written.
    """
    arr = np.asarray(arr, dtype=np.float64)
    idx_names = ["i", "j", "k"][:arr.ndim]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*idx_names, "value"])
        keep = np.ones(arr.shape, bool) if mask is None else np.asarray(mask) > 0
        for idx in zip(*np.nonzero(keep)):
            writer.writerow([*map(int, idx), repr(float(arr[idx]))])


def load_long_csv(path, shape):
    """Inverse of :func:`save_long_csv`; returns ``(values, mask)``."""
    values = np.zeros(shape, dtype=np.float64)
    mask = np.zeros(shape, dtype=np.float64)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != len(shape) + 1:
            raise DimensionError(f"{path}: header {header} does not match shape {shape}")
        for row in reader:
            idx = tuple(int(x) for x in row[:-1])
            values[idx] = float(row[-1])
            mask[idx] = 1.0
    return values, mask


def save_binary(path, arr):
    """Binary round trip via the ``.npy`` format (header records shape and order)."""
    np.save(Path(path), np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)


def load_binary(path):
    arr = np.load(Path(path), allow_pickle=False)
    return np.ascontiguousarray(arr, dtype=np.float64)
