import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from scmtf import data
from scmtf.data import CohortDataset, SynthConfig, ingest, preprocess, stratified_split, synth_generate
from scmtf.errors import DegenerateScaleError, DimensionError, InputError, ParameterError, SchemaError
from scmtf.tensor_core import cp_reconstruct, masked_sq_error

FEATS = ["hgb", "crp"]
WINDOWS = ("w0", "w1", "w2")


# -- ingestion ------------------------------------------------------------------

def test_single_record_single_cell():
    d = ingest([("p1", "crp", 2, 4.5)], FEATS, WINDOWS)
    assert d.dims == (1, 2, 3) and d.mask.sum() == 1
    assert d.mask[0, 1, 2] == 1 and d.tensor[0, 1, 2] == 4.5


def test_duplicates_averaged_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="scmtf.data"):
        d = ingest([("p", "hgb", 0, 1.0), ("p", "hgb", 0, 3.0)], FEATS, WINDOWS)
    assert d.tensor[0, 0, 0] == 2.0 and d.mask.sum() == 1
    assert "duplicate" in caplog.text


def test_schema_errors_name_the_record():
    with pytest.raises(SchemaError, match="unknown feature 'bmi'"):
        ingest([("p", "bmi", 0, 1.0)], FEATS, WINDOWS)
    with pytest.raises(SchemaError, match="window 3"):
        ingest([("p", "hgb", 3, 1.0)], FEATS, WINDOWS)
    with pytest.raises(SchemaError):
        ingest([("p", "hgb", "late", 1.0)], FEATS, WINDOWS)


def test_dict_records_and_companion_tables():
    recs = [{"patient_id": "a", "feature": "hgb", "window": 1, "value": 2.0}]
    d = ingest(recs, FEATS, WINDOWS, statics={"a": [1.0, None], "b": [3.0, 4.0]},
               static_names=["age", "bmi"], labels={"b": (1, None)})
    assert d.patient_ids == ["a", "b"]
    assert np.isnan(d.statics[0, 1]) and d.statics[1, 1] == 4.0
    assert np.isnan(d.labels[0]).all() and d.labels[1, 0] == 1 and np.isnan(d.labels[1, 1])


def test_csv_round_trip(tmp_path):
    d0, _ = synth_generate(SynthConfig(I=12, J=4, K=3, S=2, rank=3, missing_fraction=0.4, seed=1))
    d0.feature_names = [f"lab{j}" for j in range(4)]
    d0.patient_ids = [f"P{i:03d}" for i in range(12)]
    d0.static_names = ["age", "bmi"]
    data.write_long_csv(d0, tmp_path / "long.csv")
    data.write_statics_csv(d0, tmp_path / "statics.csv")
    data.write_labels_csv(d0, tmp_path / "labels.csv")
    d1 = data.ingest_csv(tmp_path / "long.csv", d0.feature_names, d0.timepoint_names,
                         tmp_path / "statics.csv", tmp_path / "labels.csv")
    assert d1.patient_ids == d0.patient_ids
    for name in ("tensor", "mask", "statics", "labels"):
        assert np.array_equal(getattr(d1, name), getattr(d0, name)), name


def test_dataset_validation():
    with pytest.raises(DimensionError):
        CohortDataset(np.zeros((2, 2, 2)), np.zeros((2, 2, 1)), np.zeros((2, 1)))
    with pytest.raises(DimensionError):
        CohortDataset(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((3, 1)))
    with pytest.raises(InputError):
        CohortDataset(np.zeros((2, 1, 1)), np.ones((2, 1, 1)), np.zeros((2, 1)), split=["train", "x"])


# -- preprocessing ----------------------------------------------------------------

def mm(x):
    x = np.asarray(x, dtype=float)
    return (x - x.min()) / (x.max() - x.min())


def three_patients():
    # feature 0 fully observed, feature 1 observed for two patients per window
    t = np.array([
        [[1.0, 2.0], [10.0, 0.0]],
        [[3.0, 2.0], [20.0, 5.0]],
        [[5.0, 8.0], [0.0, 7.0]],
    ])
    m = np.array([
        [[1, 1], [1, 0]],
        [[1, 1], [1, 1]],
        [[1, 1], [0, 1]],
    ], dtype=float)
    statics = np.array([[1.0, 4.0], [np.nan, 6.0], [5.0, 5.0]])
    labels = np.array([[1.0, np.nan], [0.0, 1.0], [np.nan, 0.0]])
    return CohortDataset(t, m, statics, labels, ["f0", "f1"], ["t0", "t1"], ["s0", "s1"])


def test_three_patient_hand_computation():
    out = preprocess(three_patients())
    exp = np.zeros((3, 2, 2))
    exp[:, 0, 0] = mm([1, 3, 5])
    exp[:, 0, 1] = [0.0, 0.0, 1.0]
    exp[[0, 1], 1, 0] = mm([10, 20])
    exp[[1, 2], 1, 1] = mm([5, 7])
    np.testing.assert_allclose(out.tensor, exp, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(out.mask, three_patients().mask)
    # static 0 mean-imputed to 3 then scaled
    np.testing.assert_allclose(out.statics[:, 0], [0.0, 0.5, 1.0], atol=1e-12)
    np.testing.assert_allclose(out.statics[:, 1], [0.0, 1.0, 0.5], atol=1e-12)
    np.testing.assert_array_equal(out.labels, [[1, 0], [0, 1], [0, 0]])


def test_pooled_timepoint_groups():
    out = preprocess(three_patients(), per="timepoint")
    pooled = mm([1, 3, 5, 10, 20])
    np.testing.assert_allclose(out.tensor[:, 0, 0], pooled[:3], atol=1e-12)
    np.testing.assert_allclose(out.tensor[[0, 1], 1, 0], pooled[3:], atol=1e-12)


def test_denormalize_round_trip():
    d = three_patients()
    out = preprocess(d)
    back = data.denormalize_temporal(out, out.tensor)
    obs = d.mask > 0
    # the constant group has no scale to invert, everything else comes back
    varying = obs.copy()
    varying[:, 0, 1] = False
    np.testing.assert_allclose(back[varying], d.tensor[varying], rtol=1e-12)
    assert back.shape == d.dims


def test_sparse_patient_dropped():
    d = three_patients()
    t = np.concatenate([d.tensor, np.zeros((1, 2, 2))])
    m = np.concatenate([d.mask, np.zeros((1, 2, 2))])
    d2 = CohortDataset(t, m, np.vstack([d.statics, [[1.0, 1.0]]]),
                       np.vstack([d.labels, [[1.0, 1.0]]]), d.feature_names, d.timepoint_names,
                       d.static_names, ["a", "b", "c", "gone"])
    out = preprocess(d2)
    assert out.patient_ids == ["a", "b", "c"]
    np.testing.assert_allclose(out.tensor, preprocess(d).tensor, atol=1e-12)


def test_degenerate_group_named():
    d = three_patients()
    d.mask[:, 1, 0] = [1, 0, 0]
    with pytest.raises(DegenerateScaleError, match="'f1'.*'t0'"):
        preprocess(d)


def test_preprocessed_values_in_unit_interval():
    d, _ = synth_generate(SynthConfig(I=50, J=6, K=4, S=3, rank=3, missing_fraction=0.5, seed=2))
    out = preprocess(d)
    obs = out.tensor[out.mask > 0]
    assert obs.min() >= 0 and obs.max() <= 1
    assert out.statics.min() >= 0 and out.statics.max() <= 1


def test_preprocess_idempotent():
    d, _ = synth_generate(SynthConfig(I=50, J=6, K=4, S=3, rank=3, missing_fraction=0.5, seed=3))
    once = preprocess(d)
    twice = preprocess(once)
    np.testing.assert_allclose(twice.tensor, once.tensor, atol=1e-12, rtol=0)
    np.testing.assert_allclose(twice.statics, once.statics, atol=1e-12, rtol=0)
    assert twice.patient_ids == once.patient_ids


def test_preprocess_rejects_unknown_grouping():
    with pytest.raises(ParameterError):
        preprocess(three_patients(), per="feature")


# -- splitting ---------------------------------------------------------------------

def test_balanced_strata_exact():
    labels = np.repeat([[0, 0], [0, 1], [1, 0], [1, 1]], 25, axis=0)
    split = stratified_split(labels, seed=0)
    counts = {s: int(np.sum(split == s)) for s in data.SPLITS}
    assert counts == {"train": 60, "val": 20, "test": 20}
    assert np.array_equal(split, stratified_split(labels, seed=0))
    assert not np.array_equal(split, stratified_split(labels, seed=1))


@given(st.lists(st.sampled_from([(0, 0), (0, 1), (1, 0), (1, 1)]), min_size=1, max_size=120),
       st.integers(0, 1000))
@settings(max_examples=60)
def test_split_fractions_within_rounding(rows, seed):
    labels = np.array(rows, dtype=float)
    split = stratified_split(labels, seed=seed)
    assert set(split) <= set(data.SPLITS)
    for y in ((0, 0), (0, 1), (1, 0), (1, 1)):
        stratum = np.all(labels == y, axis=1)
        n = stratum.sum()
        if n < 3:
            assert np.all(split[stratum] == "train")
            continue
        for name, frac in zip(data.SPLITS, (0.6, 0.2, 0.2)):
            assert abs(np.sum(split[stratum] == name) - frac * n) < 1


def test_tiny_stratum_warns(caplog):
    labels = np.array([[1, 1]] + [[0, 0]] * 10, dtype=float)
    with caplog.at_level(logging.WARNING, logger="scmtf.data"):
        split = stratified_split(labels)
    assert split[0] == "train" and "assigned to train" in caplog.text


def test_split_fraction_validation():
    with pytest.raises(ParameterError):
        stratified_split(np.zeros((4, 2)), (0.5, 0.5, 0.5))


# -- synthetic cohorts ----------------------------------------------------------------

def test_noiseless_complete_cohort_is_exact():
    cfg = SynthConfig(I=30, J=6, K=4, S=3, rank=3, noise_sd=0.0, seed=4)
    d, truth = synth_generate(cfg)
    model = cp_reconstruct(truth.factors) + truth.b_feat[None, :, None] + truth.b_pat[:, None, None]
    assert masked_sq_error(d.tensor, model, d.mask) == 0.0
    assert d.mask.all()


def test_missing_fraction_within_binomial_bound():
    cfg = SynthConfig(I=200, J=40, K=7, S=12, missing_fraction=0.9, seed=5)
    d, _ = synth_generate(cfg)
    n = d.mask.size
    assert abs(d.mask.sum() - 0.1 * n) <= 3 * np.sqrt(n * 0.1 * 0.9)


def test_labels_predictable_from_planted_memberships():
    d, truth = synth_generate(SynthConfig(seed=6))
    tr, te = d.train_idx, d.split_idx("test")
    for o in range(2):
        lr = LogisticRegression().fit(truth.factors.A[tr], d.labels[tr, o])
        assert roc_auc_score(d.labels[te, o], lr.predict_proba(truth.factors.A[te])[:, 1]) >= 0.95
    assert truth.label_driving == [0, 1, 2]


def test_synth_bit_deterministic():
    a, ta = synth_generate(SynthConfig(I=20, J=5, K=3, S=2, rank=3, missing_fraction=0.3, seed=7))
    b, tb = synth_generate(SynthConfig(I=20, J=5, K=3, S=2, rank=3, missing_fraction=0.3, seed=7))
    for name in ("tensor", "mask", "statics", "labels"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert list(a.split) == list(b.split)
    assert ta.factors.A.tobytes() == tb.factors.A.tobytes()


def test_planted_factors_nonnegative_and_unobserved_zero():
    d, truth = synth_generate(SynthConfig(I=20, J=5, K=3, S=2, rank=3, missing_fraction=0.5, seed=8))
    for n in "wABCD":
        assert getattr(truth.factors, n).min() >= 0
    assert not d.tensor[d.mask == 0].any()


def test_synth_config_validation():
    with pytest.raises(ParameterError):
        SynthConfig(missing_fraction=0.96)
    with pytest.raises(ParameterError):
        SynthConfig(noise_sd=-1)
    with pytest.raises(ParameterError):
        SynthConfig(rank=2, label_components=((0, 5),))


def test_infeasible_mask_errors():
    with pytest.raises(ParameterError, match="fully unobserved"):
        synth_generate(SynthConfig(I=400, J=1, K=1, S=1, rank=1, missing_fraction=0.95, label_components=((0,), (0,)),
                                   max_retries=3, seed=0))


def test_bundle_round_trip(tmp_path):
    d, truth = synth_generate(SynthConfig(I=15, J=4, K=3, S=2, rank=3, missing_fraction=0.2, seed=9))
    data.save_bundle(d, tmp_path / "b", truth)
    e = data.load_bundle(tmp_path / "b")
    for name in ("tensor", "mask", "statics", "labels"):
        assert np.array_equal(getattr(e, name), getattr(d, name))
    assert list(e.split) == list(d.split) and e.seed == 9
    t2 = data.load_ground_truth(tmp_path / "b")
    assert np.array_equal(t2.factors.A, truth.factors.A)
    assert np.array_equal(t2.complete_tensor, truth.complete_tensor)
