"""Interpretable views of a trained factorization.

A phenotype is component ``s``: patient memberships ``A[:, s]``, temporal
feature contributions ``B[:, s]``, temporal pattern ``C[:, s]`` and static
feature contributions ``D[:, s]``. Everything here is read-only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import check_labels
from .errors import DimensionError, InputError, ParameterError
from .tensor_core import FactorSet, normalize_columns, phenotype_weights

DEFAULT_RULE = {"kind": "quantile", "q": 0.75}


@dataclass
class Phenotype:
    index: int
    weight: float
    temporal_contributions: list   # (name, value) above the display threshold
    static_contributions: list
    temporal_pattern: np.ndarray   # raw C column
    memberships: np.ndarray        # raw A column
    B_column: np.ndarray
    D_column: np.ndarray

    def to_dict(self):
        return {
            "index": self.index,
            "weight": self.weight,
            "temporal_contributions": [[n, float(v)] for n, v in self.temporal_contributions],
            "static_contributions": [[n, float(v)] for n, v in self.static_contributions],
            "temporal_pattern": self.temporal_pattern.tolist(),
            "memberships": self.memberships.tolist(),
            "B_column": self.B_column.tolist(),
            "D_column": self.D_column.tolist(),
        }


@dataclass
class PhenotypeReport:
    phenotypes: list
    rule: dict
    display_threshold: float
    positive_fractions: dict = field(default_factory=dict)   # index -> result dict

    def to_dict(self):
        out = {"display_threshold": self.display_threshold, "membership_rule": self.rule,
               "phenotypes": []}
        for ph in self.phenotypes:
            entry = ph.to_dict()
            if ph.index in self.positive_fractions:
                entry["positive_fraction"] = self.positive_fractions[ph.index]
            out["phenotypes"].append(entry)
        return out


def _filtered(names, column, threshold):
    keep = [(names[j], float(column[j])) for j in range(column.size) if column[j] > threshold]
    return sorted(keep, key=lambda t: -t[1])


def extract(f: FactorSet, feature_names, static_names, display_threshold=0.2):
    """One :class:`Phenotype` per component.

    ``f`` is column-normalized first if it is not already (normalization is
    idempotent). Display lists keep entries strictly above the threshold,
    largest first; the raw columns are carried along untouched.
    """
    I, J, K, S = f.shape
    if len(feature_names) != J:
        raise InputError(f"{len(feature_names)} feature names for {J} temporal features")
    if len(static_names) != S:
        raise InputError(f"{len(static_names)} static names for {S} static features")
    g = normalize_columns(f)
    weights = phenotype_weights(g)
    out = []
    for s in range(f.rank):
        out.append(Phenotype(
            index=s,
            weight=float(weights[s]),
            temporal_contributions=_filtered(feature_names, g.B[:, s], display_threshold),
            static_contributions=_filtered(static_names, g.D[:, s], display_threshold),
            temporal_pattern=g.C[:, s].copy(),
            memberships=g.A[:, s].copy(),
            B_column=g.B[:, s].copy(),
            D_column=g.D[:, s].copy(),
        ))
    return out


def members(phen: Phenotype, rule=None):
    """Boolean membership vector under ``rule``.

    Rules: ``{"kind": "quantile", "q": 0.75}`` (strictly above the column's
    q-quantile), ``{"kind": "threshold", "value": t}`` (strictly above t) and
    ``{"kind": "all"}``.
    """
    rule = rule or DEFAULT_RULE
    a = phen.memberships
    kind = rule.get("kind")
    if kind == "all":
        return np.ones(a.size, dtype=bool)
    if kind == "quantile":
        q = rule.get("q", 0.75)
        if not 0.0 <= q <= 1.0:
            raise ParameterError(f"quantile must lie in [0, 1], got {q}")
        return a > np.quantile(a, q)
    if kind == "threshold":
        return a > rule["value"]
    raise ParameterError(f"unknown membership rule {rule!r}")


def positive_fraction(phen: Phenotype, labels, rule=None):
    """Share of member patients with label 1, per outcome.

    Returns a dict with ``fractions`` (None entries when undefined),
    ``n_members`` and ``undefined``.
    """
    labels = check_labels(labels)
    if labels.shape[0] != phen.memberships.size:
        raise DimensionError(f"{labels.shape[0]} label rows for {phen.memberships.size} patients")
    mem = members(phen, rule)
    n = int(mem.sum())
    if n == 0:
        return {"fractions": [None] * labels.shape[1], "n_members": 0, "undefined": True}
    return {"fractions": labels[mem].mean(axis=0).tolist(), "n_members": n, "undefined": False}


def mean_trajectory(phen: Phenotype, data, feature, rule=None):
    """Per-timepoint mean of one temporal feature over member patients.

    Only observed cells count. Returns ``(means, missing)`` where ``means``
    is NaN exactly where ``missing`` is True.
    """
    I, J, K = data.dims
    if not 0 <= feature < J:
        raise DimensionError(f"feature index {feature} outside [0, {J})")
    mem = members(phen, rule)
    vals = data.tensor[mem, feature, :]
    obs = data.mask[mem, feature, :] > 0
    counts = obs.sum(axis=0)
    sums = np.where(obs, vals, 0.0).sum(axis=0)
    missing = counts == 0
    means = np.full(K, np.nan)
    means[~missing] = sums[~missing] / counts[~missing]
    return means, missing


def bias_summary(biases, feature_names=None, bins=20):
    """Histogram of patient biases and a feature-bias table sorted by |bias|."""
    b_pat = np.asarray(biases.b_pat, dtype=np.float64)
    b_feat = np.asarray(biases.b_feat, dtype=np.float64)
    names = list(feature_names) if feature_names is not None else [str(j) for j in range(b_feat.size)]
    if len(names) != b_feat.size:
        raise InputError(f"{len(names)} names for {b_feat.size} feature biases")
    if b_pat.size and np.ptp(b_pat) == 0:
        # np.histogram would spread a constant sample over an artificial range
        counts, edges = np.array([b_pat.size]), np.array([b_pat[0], b_pat[0]])
    else:
        counts, edges = np.histogram(b_pat, bins=bins)
    order = np.argsort(-np.abs(b_feat), kind="stable")
    return {
        "patient_hist": {"counts": counts.tolist(), "edges": edges.tolist()},
        "patient_mean": float(b_pat.mean()) if b_pat.size else None,
        "patient_sd": float(b_pat.std(ddof=1)) if b_pat.size > 1 else None,
        "feature_table": [(names[j], float(b_feat[j])) for j in order],
    }


def build_report(f: FactorSet, feature_names, static_names, labels=None, rule=None,
                 display_threshold=0.2):
    rule = dict(rule or DEFAULT_RULE)
    phens = extract(f, feature_names, static_names, display_threshold)
    fr = {}
    if labels is not None:
        fr = {ph.index: positive_fraction(ph, labels, rule) for ph in phens}
    return PhenotypeReport(phens, rule, display_threshold, fr)


def write_report(report: PhenotypeReport, directory, data=None, biases=None,
                 feature_names=None, trajectory_features=()):
    """JSON report plus plot-ready CSVs in ``directory``; returns written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "phenotypes.json"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2))

    p = out / "temporal_patterns.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phenotype", "timepoint", "value"])
        for ph in report.phenotypes:
            for k, v in enumerate(ph.temporal_pattern):
                w.writerow([ph.index, k, repr(float(v))])
    paths.append(p)

    if data is not None and trajectory_features:
        p = out / "trajectories.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phenotype", "feature", "timepoint", "mean", "missing"])
            for ph in report.phenotypes:
                for j in trajectory_features:
                    means, miss = mean_trajectory(ph, data, j, report.rule)
                    for k in range(means.size):
                        w.writerow([ph.index, j, k, "" if miss[k] else repr(float(means[k])), int(miss[k])])
        paths.append(p)

    if biases is not None:
        summ = bias_summary(biases, feature_names)
        p = out / "bias_hist.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["left", "right", "count"])
            e, c = summ["patient_hist"]["edges"], summ["patient_hist"]["counts"]
            for i, n in enumerate(c):
                w.writerow([repr(e[i]), repr(e[i + 1]), n])
        paths.append(p)
        p = out / "bias_features.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "bias"])
            for name, b in summ["feature_table"]:
                w.writerow([name, repr(b)])
        paths.append(p)
    return paths
