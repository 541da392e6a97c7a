"""Cohort containers, ingestion, preprocessing, splitting and synthetic cohorts."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DegenerateScaleError, DimensionError, InputError, ParameterError, SchemaError
from .tensor_core import FactorSet, LAYOUT, coupled_reconstruct, cp_reconstruct, load_binary, save_binary

log = logging.getLogger(__name__)

DEFAULT_WINDOWS = ("m-16:-12", "m-12:-8", "m-8:-4", "baseline", "m+4:+8", "m+8:+12", "m+12:+16")
OUTCOMES = ("persist_yr2", "persist_yr3")
SPLITS = ("train", "val", "test")


@dataclass
class CohortDataset:
    """Temporal tensor, observation mask, static matrix and outcome labels.

    ``tensor`` is (I, J, K), ``mask`` the same shape with 1 for observed cells,
    ``statics`` is (I, S) and ``labels`` is (I, 2) or None. Raw (unprocessed)
    datasets may carry NaN in ``statics`` and ``labels``.
    """

    tensor: np.ndarray
    mask: np.ndarray
    statics: np.ndarray
    labels: np.ndarray | None = None
    feature_names: list = None
    timepoint_names: list = None
    static_names: list = None
    patient_ids: list = None
    split: np.ndarray | None = None
    norm: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.statics = np.asarray(self.statics, dtype=np.float64)
        if self.statics.ndim == 1:
            self.statics = self.statics.reshape(-1, 0)
        I, J, K = self.tensor.shape
        if self.mask.shape != self.tensor.shape:
            raise DimensionError(f"mask {self.mask.shape} vs tensor {self.tensor.shape}")
        if self.statics.shape[0] != I:
            raise DimensionError(f"statics has {self.statics.shape[0]} rows, tensor has {I}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (I, 2):
                raise DimensionError(f"labels must be ({I}, 2), got {self.labels.shape}")
        if self.feature_names is None:
            self.feature_names = [f"feat_{j}" for j in range(J)]
        if self.timepoint_names is None:
            self.timepoint_names = [f"t{k}" for k in range(K)]
        if self.static_names is None:
            self.static_names = [f"static_{s}" for s in range(self.statics.shape[1])]
        if self.patient_ids is None:
            self.patient_ids = [str(i) for i in range(I)]
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=object)
            if self.split.shape != (I,) or not set(self.split) <= set(SPLITS):
                raise InputError("split must assign every patient to train/val/test")

    @property
    def dims(self):
        return self.tensor.shape

    @property
    def n_patients(self):
        return self.tensor.shape[0]

    def split_idx(self, name):
        if self.split is None:
            return np.arange(self.n_patients) if name == "train" else np.array([], dtype=int)
        return np.flatnonzero(self.split == name)

    @property
    def train_idx(self):
        return self.split_idx("train")

    def with_mask(self, mask):
        return replace(self, mask=np.asarray(mask, dtype=np.float64))

    def missing_fraction(self):
        return 1.0 - self.mask.mean()


# -- ingestion --------------------------------------------------------------

def _record_fields(rec):
    if isinstance(rec, dict):
        return rec["patient_id"], rec["feature"], rec["window"], rec["value"]
    return tuple(rec)


def ingest(records, feature_names, window_names=DEFAULT_WINDOWS, statics=None,
           static_names=None, labels=None, patient_ids=None):
    """Build a raw :class:`CohortDataset` from long-format records.

    Parameters
    ----------
    records : iterable
        ``(patient_id, feature, window, value)`` tuples or dicts with those
        keys. ``window`` is the integer window index.
    feature_names : sequence of str
        Known temporal features, defining the J axis order.
    window_names : sequence of str
        Defines K.
    statics : mapping patient_id -> sequence of float, optional
        Missing entries may be None or NaN.
    labels : mapping patient_id -> (y2, y3), optional
        Missing outcomes may be None or NaN.
    patient_ids : sequence, optional
        Patient order; defaults to order of first appearance.

    Duplicate (patient, feature, window) cells are averaged with a warning.
    """
    records = [_record_fields(r) for r in records]
    feat_pos = {name: j for j, name in enumerate(feature_names)}
    K = len(window_names)
    if patient_ids is None:
        seen = {}
        for src in (records, statics or {}, labels or {}):
            for item in src:
                pid = str(item[0]) if isinstance(item, tuple) else str(item)
                seen.setdefault(pid, len(seen))
        patient_ids = list(seen)
    patient_ids = [str(p) for p in patient_ids]
    pat_pos = {pid: i for i, pid in enumerate(patient_ids)}
    I, J = len(patient_ids), len(feature_names)

    sums = np.zeros((I, J, K))
    counts = np.zeros((I, J, K))
    for n, (pid, feat, window, value) in enumerate(records):
        if feat not in feat_pos:
            raise SchemaError(f"record {n} {(pid, feat, window, value)}: unknown feature {feat!r}")
        try:
            k = int(window)
        except (TypeError, ValueError):
            raise SchemaError(f"record {n}: window {window!r} is not an integer") from None
        if not 0 <= k < K:
            raise SchemaError(f"record {n} {(pid, feat, window, value)}: window {k} outside 0..{K - 1}")
        if str(pid) not in pat_pos:
            raise SchemaError(f"record {n}: unknown patient {pid!r}")
        idx = pat_pos[str(pid)], feat_pos[feat], k
        sums[idx] += float(value)
        counts[idx] += 1

    dup = counts > 1
    if dup.any():
        log.warning("averaged %d duplicate (patient, feature, window) cells", int(dup.sum()))
    mask = (counts > 0).astype(np.float64)
    tensor = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    S = len(static_names) if static_names is not None else 0
    static_mat = np.full((I, S), np.nan)
    for pid, vals in (statics or {}).items():
        vals = [np.nan if v is None or v == "" else float(v) for v in vals]
        if len(vals) != S:
            raise SchemaError(f"statics for patient {pid!r} have {len(vals)} values, expected {S}")
        static_mat[pat_pos[str(pid)]] = vals

    label_mat = None
    if labels is not None:
        label_mat = np.full((I, 2), np.nan)
        for pid, vals in labels.items():
            label_mat[pat_pos[str(pid)]] = [np.nan if v is None or v == "" else float(v)
                                            for v in vals]

    return CohortDataset(tensor, mask, static_mat, label_mat, list(feature_names),
                         list(window_names), list(static_names or []), patient_ids)


def read_long_csv(path):
    """Records from a ``patient_id,feature,window,value`` CSV."""
    with open(path, newline="") as fh:
        return [(r["patient_id"], r["feature"], int(r["window"]), float(r["value"]))
                for r in csv.DictReader(fh)]


def read_table_csv(path):
    """``patient_id,<col>,...`` CSV -> (column names, {patient_id: values})."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = {row[0]: row[1:] for row in reader}
    return header[1:], rows


def write_long_csv(d: CohortDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "feature", "window", "value"])
        for i, j, k in zip(*np.nonzero(d.mask > 0)):
            w.writerow([d.patient_ids[i], d.feature_names[j], int(k), repr(float(d.tensor[i, j, k]))])


def _write_table(path, header, ids, mat):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *header])
        for pid, row in zip(ids, mat):
            w.writerow([pid, *("" if np.isnan(v) else repr(float(v)) for v in row)])


def write_statics_csv(d: CohortDataset, path):
    _write_table(path, d.static_names, d.patient_ids, d.statics)


def write_labels_csv(d: CohortDataset, path):
    _write_table(path, list(OUTCOMES), d.patient_ids, d.labels)


def ingest_csv(long_path, feature_names=None, window_names=DEFAULT_WINDOWS,
               statics_path=None, labels_path=None):
    records = read_long_csv(long_path)
    if feature_names is None:
        feature_names = list(dict.fromkeys(r[1] for r in records))
    static_names, statics = (None, None)
    if statics_path is not None:
        static_names, statics = read_table_csv(statics_path)
    labels = None
    if labels_path is not None:
        _, labels = read_table_csv(labels_path)
    ids = None
    if statics is not None:
        ids = list(statics)
    elif labels is not None:
        ids = list(labels)
    return ingest(records, feature_names, window_names, statics, static_names, labels, ids)


# -- preprocessing ----------------------------------------------------------

def _standardize_minmax(values, name):
    if values.size < 2:
        raise DegenerateScaleError(f"{name}: {values.size} observed entries, need >= 2")
    mean = values.mean()
    std = values.std()
    if std == 0:
        log.warning("%s: constant values, mapped to 0", name)
        return np.zeros_like(values), dict(mean=mean, std=0.0, zmin=0.0, zmax=0.0)
    z = (values - mean) / std
    zmin, zmax = z.min(), z.max()
    return (z - zmin) / (zmax - zmin), dict(mean=mean, std=std, zmin=zmin, zmax=zmax)


def preprocess(d: CohortDataset, per="feature_timepoint", missing_threshold=0.9):
    """Apply the cohort preprocessing pipeline and return a new dataset.

    Steps, in order: drop patients with at least ``missing_threshold`` of
    their temporal cells missing; mean-impute statics; set missing outcomes
    to 0 (failure); standardize then min-max scale observed temporal entries
    per (feature, timepoint) group (``per="timepoint"`` pools features);
    standardize then min-max scale each static feature. Scale parameters are
    stored in ``norm`` so values can be mapped back with
    :func:`denormalize_temporal`.
    """
    if per not in ("feature_timepoint", "timepoint"):
        raise ParameterError(f"per must be 'feature_timepoint' or 'timepoint', got {per!r}")
    I, J, K = d.dims
    missing = 1.0 - d.mask.reshape(I, -1).mean(axis=1)
    keep = np.flatnonzero(missing < missing_threshold)
    if keep.size < I:
        log.info("dropping %d patients with >= %.0f%% missing temporal cells",
                 I - keep.size, 100 * missing_threshold)
    tensor = d.tensor[keep].copy()
    mask = d.mask[keep].copy()
    statics = d.statics[keep].copy()

    col_means = np.array([np.nanmean(c) if np.any(~np.isnan(c)) else 0.0 for c in statics.T])
    nan = np.isnan(statics)
    statics[nan] = np.take(col_means, np.nonzero(nan)[1])

    labels = None
    if d.labels is not None:
        labels = np.nan_to_num(d.labels[keep], nan=0.0)

    groups = ([(slice(None), j, k) for j in range(J) for k in range(K)] if per == "feature_timepoint"
              else [(slice(None), slice(None), k) for k in range(K)])
    shape = (J, K) if per == "feature_timepoint" else (K,)
    t_par = {key: np.zeros(shape) for key in ("mean", "std", "zmin", "zmax")}
    out = np.zeros_like(tensor)
    for g in groups:
        obs = mask[g] > 0
        name = (f"feature {d.feature_names[g[1]]!r} timepoint {d.timepoint_names[g[2]]!r}"
                if per == "feature_timepoint" else f"timepoint {d.timepoint_names[g[2]]!r}")
        scaled, par = _standardize_minmax(tensor[g][obs], name)
        block = np.zeros(obs.shape)
        block[obs] = scaled
        out[g] = block
        pos = (g[1], g[2]) if per == "feature_timepoint" else (g[2],)
        for key in t_par:
            t_par[key][pos] = par[key]

    s_par = {key: np.zeros(statics.shape[1]) for key in ("mean", "std", "zmin", "zmax")}
    s_out = np.zeros_like(statics)
    for s in range(statics.shape[1]):
        s_out[:, s], par = _standardize_minmax(statics[:, s], f"static {d.static_names[s]!r}")
        for key in s_par:
            s_par[key][s] = par[key]

    norm = {"per": per, "temporal": {k: v.tolist() for k, v in t_par.items()},
            "static": {k: v.tolist() for k, v in s_par.items()},
            "kept_patients": [d.patient_ids[i] for i in keep]}
    return replace(d, tensor=out, mask=mask, statics=s_out, labels=labels,
                   patient_ids=[d.patient_ids[i] for i in keep],
                   split=None if d.split is None else d.split[keep], norm=norm)


def denormalize_temporal(d: CohortDataset, values):
    """Map a [0,1]-scaled (I, J, K) tensor back to original units."""
    par = {k: np.asarray(v) for k, v in d.norm["temporal"].items()}
    if d.norm["per"] == "timepoint":
        par = {k: np.broadcast_to(v[None, :], d.dims[1:]) for k, v in par.items()}
    z = values * (par["zmax"] - par["zmin"]) + par["zmin"]
    return z * par["std"] + par["mean"]


# -- splitting --------------------------------------------------------------

def _largest_remainder(n, fractions):
    raw = np.array(fractions) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for pos in order[: n - counts.sum()]:
        counts[pos] += 1
    return counts


def stratified_split(labels, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign each patient to train/val/test, stratified on both outcomes.

    Every (y2, y3) stratum is split proportionally with largest-remainder
    rounding. Strata with fewer than 3 members go entirely to train.
    """
    labels = np.nan_to_num(np.asarray(labels, dtype=np.float64), nan=0.0)
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ParameterError(f"fractions must be 3 non-negative values summing to 1: {fractions}")
    rng = np.random.default_rng(seed)
    split = np.empty(labels.shape[0], dtype=object)
    for y2 in (0, 1):
        for y3 in (0, 1):
            members = np.flatnonzero((labels[:, 0] == y2) & (labels[:, 1] == y3))
            if members.size == 0:
                continue
            members = rng.permutation(members)
            if members.size < 3:
                log.warning("stratum (%d, %d) has %d members; assigned to train",
                            y2, y3, members.size)
                split[members] = "train"
                continue
            counts = _largest_remainder(members.size, fractions)
            bounds = np.cumsum(counts)[:-1]
            for name, part in zip(SPLITS, np.split(members, bounds)):
                split[part] = name
    return split


# -- synthetic cohorts ------------------------------------------------------

@dataclass
class SynthConfig:
    I: int = 200
    J: int = 40
    K: int = 7
    S: int = 12
    rank: int = 5
    factor_sparsity: float = 0.3
    cp_peak: float = 0.6
    bias_patient_mean: float = 0.1
    bias_patient_sd: float = 0.05
    bias_feature_scale: float = 0.3
    noise_sd: float = 0.01
    missing_fraction: float = 0.0
    # outcome o is Bernoulli(sigmoid(label_strength * sum of z-scored A columns))
    label_components: tuple = ((0, 1), (0, 2))
    label_strength: float = 6.0
    split_fractions: tuple = (0.6, 0.2, 0.2)
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.missing_fraction <= 0.95:
            raise ParameterError(f"missing_fraction must lie in [0, 0.95], got {self.missing_fraction}")
        if self.noise_sd < 0:
            raise ParameterError("noise_sd must be >= 0")
        if self.rank < 1:
            raise ParameterError("rank must be >= 1")
        self.label_components = tuple(tuple(c) for c in self.label_components)
        self.split_fractions = tuple(self.split_fractions)
        for comps in self.label_components:
            if any(not 0 <= c < self.rank for c in comps):
                raise ParameterError(f"label component out of range: {comps}")


@dataclass
class GroundTruth:
    factors: FactorSet
    b_feat: np.ndarray
    b_pat: np.ndarray
    complete_tensor: np.ndarray  # noiseless, fully observed
    label_logits: np.ndarray
    label_driving: list = field(default_factory=list)


def _sparse_uniform(rng, shape, sparsity, low=0.0):
    M = rng.uniform(low, 1.0, size=shape)
    M[rng.random(shape) < sparsity] = 0.0
    # keep every column nonzero
    for s in range(shape[1]):
        if not M[:, s].any():
            M[rng.integers(shape[0]), s] = rng.uniform(0.5, 1.0)
    return M


def synth_generate(cfg: SynthConfig):
    """Synthetic cohort with planted nonnegative factors, biases and labels.

    Returns ``(dataset, truth)``. Unobserved tensor cells are stored as 0.
    """
    # separate stream from init_params(seed) so a shared seed cannot leak the truth
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    r = cfg.rank
    A = _sparse_uniform(rng, (cfg.I, r), cfg.factor_sparsity)
    B = _sparse_uniform(rng, (cfg.J, r), cfg.factor_sparsity)
    C = rng.uniform(0.1, 1.0, size=(cfg.K, r))
    D = _sparse_uniform(rng, (cfg.S, r), cfg.factor_sparsity)
    mats = [M / np.linalg.norm(M, axis=0) for M in (A, B, C, D)]
    f = FactorSet(np.ones(r), *mats)
    f.w = f.w * (cfg.cp_peak / cp_reconstruct(f).max())

    b_pat = rng.normal(cfg.bias_patient_mean, cfg.bias_patient_sd, size=cfg.I)
    b_feat = rng.uniform(0.0, cfg.bias_feature_scale, size=cfg.J)
    clean = cp_reconstruct(f) + b_feat[None, :, None] + b_pat[:, None, None]
    noisy = clean + cfg.noise_sd * rng.standard_normal(clean.shape)
    statics = coupled_reconstruct(f) + cfg.noise_sd * rng.standard_normal((cfg.I, cfg.S))

    Az = (f.A - f.A.mean(axis=0)) / f.A.std(axis=0)
    logits = np.stack([cfg.label_strength * Az[:, list(c)].sum(axis=1)
                       for c in cfg.label_components], axis=1)
    labels = (rng.random(logits.shape) < expit(logits)).astype(np.float64)

    for attempt in range(cfg.max_retries):
        mask = (rng.random(clean.shape) >= cfg.missing_fraction).astype(np.float64)
        if mask.reshape(cfg.I, -1).sum(axis=1).min() > 0:
            break
        log.info("synthetic mask left a patient unobserved; redrawing (attempt %d)", attempt + 1)
    else:
        raise ParameterError(
            f"missing_fraction {cfg.missing_fraction} leaves a patient fully unobserved "
            f"after {cfg.max_retries} draws")

    split = stratified_split(labels, cfg.split_fractions, seed=cfg.seed)
    d = CohortDataset(np.where(mask > 0, noisy, 0.0), mask, statics, labels,
                      timepoint_names=[f"t{k}" for k in range(cfg.K)], split=split,
                      seed=cfg.seed)
    driving = sorted({c for comps in cfg.label_components for c in comps})
    return d, GroundTruth(f, b_feat, b_pat, clean, logits, driving)


# -- bundles ----------------------------------------------------------------

def save_bundle(d: CohortDataset, directory, truth: GroundTruth | None = None, extra=None):
    """Write a dataset bundle directory: ``.npy`` arrays plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_binary(directory / "tensor.npy", d.tensor)
    save_binary(directory / "mask.npy", d.mask)
    save_binary(directory / "statics.npy", d.statics)
    if d.labels is not None:
        save_binary(directory / "labels.npy", d.labels)
    I, J, K = d.dims
    manifest = {
        "format": "scmtf-bundle/1",
        "layout": LAYOUT,
        "dims": {"I": I, "J": J, "K": K, "S": d.statics.shape[1]},
        "feature_names": d.feature_names,
        "timepoint_names": d.timepoint_names,
        "static_names": d.static_names,
        "patient_ids": d.patient_ids,
        "outcomes": list(OUTCOMES),
        "split": None if d.split is None else list(d.split),
        "normalization": d.norm,
        "seed": d.seed,
    }
    if truth is not None:
        f = truth.factors
        gt = {n: getattr(f, n).tolist() for n in ("w", "A", "B", "C", "D")}
        gt.update(b_feat=truth.b_feat.tolist(), b_pat=truth.b_pat.tolist(),
                  label_driving=list(truth.label_driving))
        (directory / "ground_truth.json").write_text(json.dumps(gt))
        save_binary(directory / "complete_tensor.npy", truth.complete_tensor)
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_bundle(directory):
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    labels_path = directory / "labels.npy"
    d = CohortDataset(
        load_binary(directory / "tensor.npy"), load_binary(directory / "mask.npy"),
        load_binary(directory / "statics.npy"),
        load_binary(labels_path) if labels_path.exists() else None,
        man["feature_names"], man["timepoint_names"], man["static_names"], man["patient_ids"],
        None if man["split"] is None else np.array(man["split"], dtype=object),
        man.get("normalization") or {}, man.get("seed"))
    return d


def load_ground_truth(directory):
    directory = Path(directory)
    path = directory / "ground_truth.json"
    if not path.exists():
        return None
    gt = json.loads(path.read_text())
    f = FactorSet(*(np.array(gt[n]) for n in ("w", "A", "B", "C", "D")))
    return GroundTruth(f, np.array(gt["b_feat"]), np.array(gt["b_pat"]),
                       load_binary(directory / "complete_tensor.npy"), None, gt["label_driving"])
