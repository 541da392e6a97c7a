import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scmtf import classifier as clf
from scmtf.data import CohortDataset
from scmtf.errors import DimensionError, ParameterError
from scmtf.model import (
    BiasTerms, ScmtfParams, bias_tensor_features, bias_tensor_patients, impute, load_checkpoint,
    loss_and_grads, normalize_params, reconstruction_loss, save_checkpoint, sparsity_loss,
    total_loss,
)
from scmtf.tensor_core import FactorSet, coupled_reconstruct, cp_reconstruct

from conftest import random_instance

BLOCKS = ("w", "A", "B", "C", "D", "b_feat", "b_pat")


def straight_line_loss(p, d, lam, l1):
    """Loop-based recomputation of the objective, independent of model.py."""
    f, b = p.factors, p.biases
    I, J, K = d.dims
    S = d.statics.shape[1]
    tfit = 0.0
    for i in range(I):
        for j in range(J):
            for k in range(K):
                if d.mask[i, j, k]:
                    x = sum(f.w[s] * f.A[i, s] * f.B[j, s] * f.C[k, s] for s in range(f.rank))
                    x += b.b_feat[j] + b.b_pat[i]
                    tfit += (d.tensor[i, j, k] - x) ** 2
    mfit = 0.0
    for i in range(I):
        for j in range(S):
            x = sum(f.w[s] * f.A[i, s] * f.D[j, s] for s in range(f.rank))
            mfit += (d.statics[i, j] - x) ** 2
    sp = sum(abs(v) for n in "ABCD" for v in getattr(f, n).ravel())
    cl = 0.0
    if p.head is not None and d.labels is not None:
        idx = d.train_idx
        hd = p.head
        h = f.A[idx] @ hd.W1 + hd.b1
        h = (h - h.mean(0)) / np.sqrt(h.var(0) + 1e-5)
        logits = np.maximum(hd.bn_gamma * h + hd.bn_beta, 0) @ hd.W2 + hd.b2
        z, y = logits.ravel(), d.labels[idx].ravel()
        cl = float(np.mean([np.log1p(np.exp(-abs(zz))) + max(zz, 0) - yy * zz for zz, yy in zip(z, y)]))
    return tfit, mfit, l1 * sp, cl, (1 - lam) * (tfit + mfit + l1 * sp) + lam * cl


def rel_err(num, g):
    # b1 has an identically zero gradient (batch norm removes it), so the
    # denominator is floored; anything below 1e-3 is judged absolutely
    return np.linalg.norm(num - g) / max(np.linalg.norm(num), np.linalg.norm(g), 1e-3)


def fd_check(seed, lam=0.6, l1=0.05, eps=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    dims = np.random.default_rng(seed).integers(2, 7, size=5)
    I, J, K, S, r = (int(x) for x in dims)
    I = max(I, 4)
    d, p = random_instance(seed, I, J, K, S, r, positive=True)
    p.head.bn_running_mean[:] = 0

    def value(q):
        return total_loss(q, d, lam, l1).total

    _, grads = loss_and_grads(p, d, lam, l1, include_l1_grad=True)
    worst = 0.0
    for name in BLOCKS:
        base = p.block(name)
        g = grads[name]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                q = p.copy()
                arr = q.block(name).copy()
                arr[idx] += sign * eps
                q.set_block(name, arr)
                num[idx] += sign * value(q) / (2 * eps)
        worst = max(worst, rel_err(num, g))
    for name in clf.ClassifierParams.TRAINABLE:
        base = getattr(p.head, name)
        g = grads["head"][name]
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                q = p.copy()
                arr = getattr(q.head, name).copy()
                arr[idx] += sign * eps
                setattr(q.head, name, arr)
                num[idx] += sign * value(q) / (2 * eps)
        worst = max(worst, rel_err(num, g))
    return worst


def test_gradients_match_finite_differences():
    errs = [fd_check(seed) for seed in range(20)]
    assert max(errs) <= 1e-4, errs


def test_gradients_without_head():
    d, p = random_instance(3, labels=False, positive=True)
    assert fd_check_nohead(d, p) <= 1e-5


def fd_check_nohead(d, p, eps=1e-6):
    _, grads = loss_and_grads(p, d, 0.0, 0.0)
    worst = 0.0
    for name in BLOCKS:
        base = p.block(name)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                q = p.copy()
                arr = q.block(name).copy()
                arr[idx] += sign * eps
                q.set_block(name, arr)
                num[idx] += sign * reconstruction_loss(q, d) / (2 * eps)
        worst = max(worst, np.linalg.norm(num - grads[name]) / max(np.linalg.norm(num), 1e-12))
    return worst


# -- bias tensors ------------------------------------------------------------

def test_bias_tensor_examples():
    assert not bias_tensor_features(np.zeros(3), (2, 3, 4)).any()
    T = bias_tensor_features([1.0, 2.0], (3, 2, 4))
    assert np.all(T[:, 0, :] == 1) and np.all(T[:, 1, :] == 2)
    assert not bias_tensor_patients(np.zeros(2), (2, 3, 4)).any()
    assert np.all(bias_tensor_patients([5.0], (1, 2, 2)) == 5)


def test_bias_tensor_length_mismatch():
    with pytest.raises(DimensionError):
        bias_tensor_features(np.zeros(3), (2, 2, 2))
    with pytest.raises(DimensionError):
        bias_tensor_patients(np.zeros(3), (2, 2, 2))


def test_bias_gradient_is_slice_sum():
    d, p = random_instance(7, labels=False)
    _, g = loss_and_grads(p, d, 0.0)
    # gradient w.r.t. an untied bias tensor is the masked residual times 2
    R = np.where(d.mask > 0, impute(p) - d.tensor, 0.0)
    np.testing.assert_allclose(g["b_feat"], (2 * R).sum(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(g["b_pat"], (2 * R).sum(axis=(1, 2)), rtol=1e-12)


def test_bias_tying_matches_untied_perturbation():
    d, p = random_instance(8, labels=False)
    eps = 1e-6
    j = 2
    q = p.copy()
    q.biases.b_feat[j] += eps
    tied = reconstruction_loss(q, d) - reconstruction_loss(p, d)
    # same perturbation applied to every cell of slice j of an explicit bias tensor
    base = impute(p)
    pert = base.copy()
    pert[:, j, :] += eps
    untied = (np.sum(np.where(d.mask > 0, d.tensor - pert, 0) ** 2)
              - np.sum(np.where(d.mask > 0, d.tensor - base, 0) ** 2))
    assert tied == pytest.approx(untied, rel=1e-8)


# -- losses ------------------------------------------------------------------

def test_sparsity_examples(rng):
    f = FactorSet([1.0], np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((1, 1)))
    assert sparsity_loss(f) == 0
    f = FactorSet([9.0, 9.0], [[1.0, 2.0]], [[3.0, 0.0]], [[4.0, 0.0]], [[0.5, 0.0]])
    assert sparsity_loss(f) == 10.5
    g = FactorSet(np.ones(3), *(rng.random((n, 3)) for n in (4, 3, 2, 5)))
    assert sparsity_loss(g) == pytest.approx(sum(abs(x) for n in "ABCD" for x in getattr(g, n).flat))


def test_reconstruction_zero_for_exact_model(rng):
    f = FactorSet(np.ones(2), *(rng.random((n, 2)) for n in (4, 3, 2, 3)))
    b = BiasTerms(rng.random(3), rng.random(4))
    p = ScmtfParams(f, b)
    d = CohortDataset(impute(p), np.ones((4, 3, 2)), coupled_reconstruct(f))
    assert reconstruction_loss(p, d) == pytest.approx(0.0, abs=1e-25)


def test_reconstruction_zero_params_gives_data_norm(rng):
    d, _ = random_instance(1, labels=False)
    f = FactorSet(np.ones(2), *(np.zeros((n, 2)) for n in (6, 5, 4, 3)))
    p = ScmtfParams(f, BiasTerms(np.zeros(5), np.zeros(6)))
    expected = np.sum((d.tensor * d.mask) ** 2) + np.sum(d.statics ** 2)
    assert reconstruction_loss(p, d) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_matches_straight_line(seed):
    d, p = random_instance(seed)
    lb = total_loss(p, d, 0.7, 0.01)
    t, m, sp, cl, tot = straight_line_loss(p, d, 0.7, 0.01)
    for a, b in ((lb.tensor_fit, t), (lb.matrix_fit, m), (lb.sparsity, sp),
                 (lb.classifier, cl), (lb.total, tot)):
        assert a == pytest.approx(b, rel=1e-12)
    assert lb.total == pytest.approx(0.3 * (t + m + sp) + 0.7 * cl, rel=1e-12)


def test_lambda_extremes():
    d, p = random_instance(4)
    lb0 = total_loss(p, d, 0.0, 0.01)
    assert lb0.total == pytest.approx(reconstruction_loss(p, d, 0.01), rel=1e-14)
    lb1 = total_loss(p, d, 1.0, 0.01)
    assert lb1.total == pytest.approx(lb1.classifier, rel=1e-14)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_breakdown_invariant(seed, lam):
    d, p = random_instance(seed)
    lb = total_loss(p, d, lam, 0.02)
    expected = (1 - lam) * (lb.tensor_fit + lb.matrix_fit + lb.sparsity) + lam * lb.classifier
    assert lb.total == pytest.approx(expected, rel=1e-12)


def test_lambda_out_of_range():
    d, p = random_instance(0)
    with pytest.raises(ParameterError):
        total_loss(p, d, 1.5)
    with pytest.raises(ParameterError):
        total_loss(p, d, -0.1)


def test_lambda_needs_labels():
    d, p = random_instance(0, labels=False)
    with pytest.raises(ParameterError):
        total_loss(p, d, 0.5)


@given(st.integers(0, 10_000))
def test_unobserved_cells_never_matter(seed):
    d, p = random_instance(seed)
    lb, g = loss_and_grads(p, d, 0.5, 0.01)
    rng = np.random.default_rng(seed)
    junk = np.where(d.mask > 0, d.tensor, rng.normal(0, 1e6, d.tensor.shape))
    lb2, g2 = loss_and_grads(p, CohortDataset(junk, d.mask, d.statics, d.labels, split=d.split),
                             0.5, 0.01)
    assert lb == lb2
    for n in BLOCKS:
        assert np.array_equal(g[n], g2[n])


def test_classifier_term_uses_train_rows_only():
    d, p = random_instance(5)
    test_rows = d.split_idx("test")
    lb = total_loss(p, d, 0.5)
    q = p.copy()
    q.factors.A[test_rows] += 3.0
    d2 = CohortDataset(d.tensor, d.mask, d.statics, d.labels, split=d.split)
    assert total_loss(q, d2, 0.5).classifier == lb.classifier


# -- imputation --------------------------------------------------------------

def test_impute_zero_biases_is_cp(rng):
    _, p = random_instance(2)
    p.biases = BiasTerms(np.zeros(5), np.zeros(6))
    assert np.array_equal(impute(p), cp_reconstruct(p.factors))


def test_impute_recovers_heldout_planted_values(rng):
    f = FactorSet(np.ones(2), *(rng.random((n, 2)) for n in (5, 4, 3, 2)))
    p = ScmtfParams(f, BiasTerms(rng.random(4), rng.random(5)))
    truth = cp_reconstruct(f) + p.biases.b_feat[None, :, None] + p.biases.b_pat[:, None, None]
    held = rng.random(truth.shape) < 0.3
    np.testing.assert_allclose(impute(p, held.astype(float))[held], truth[held], atol=1e-12)
    assert np.all(np.isfinite(impute(p)))


# -- normalization and checkpoints -------------------------------------------

def test_normalize_params_preserves_outputs():
    d, p = random_instance(9)
    q = normalize_params(p)
    np.testing.assert_allclose(impute(q), impute(p), rtol=1e-12)
    np.testing.assert_allclose(coupled_reconstruct(q.factors), coupled_reconstruct(p.factors), rtol=1e-12)
    rows = p.factors.A[:4]
    rows_n = q.factors.A[:4]
    np.testing.assert_allclose(clf.forward(q.head, rows_n, "eval"), clf.forward(p.head, rows, "eval"),
                               rtol=1e-10, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    _, p = random_instance(11)
    q = normalize_params(p)
    save_checkpoint(tmp_path / "ck.json", q, normalized=True, method="all_at_once", seed=3)
    back, doc = load_checkpoint(tmp_path / "ck.json")
    assert doc["format"] == "scmtf-checkpoint/1" and doc["meta"]["seed"] == 3
    assert doc["normalized"] is True
    for n in ("w", "A", "B", "C", "D", "v"):
        assert np.array_equal(getattr(back.factors, n), getattr(q.factors, n))
    for k, v in q.head.arrays().items():
        assert np.array_equal(getattr(back.head, k), v)
    json.loads((tmp_path / "ck.json").read_text())


def test_gradients_refuse_two_weight_form():
    d, p = random_instance(0)
    q = normalize_params(p)
    with pytest.raises(ParameterError):
        loss_and_grads(q, d, 0.5)
    assert total_loss(q, d, 0.0).total == pytest.approx(total_loss(p, d, 0.0).total, rel=1e-12)
