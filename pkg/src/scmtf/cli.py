"""Command-line entry point: ``scmtf <command> [options]``.

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
The manifest echoes the resolved arguments, seeds, a content hash of the
inputs and the metric summary, and ``scmtf rerun`` replays it.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import classifier as clf
from . import forest, phenotypes
from .als_baseline import AlsConfig, LogRegParams, train_als
from .data import OUTCOMES, SynthConfig, load_bundle, save_bundle, synth_generate
from .errors import DivergenceError, ScmtfError
from .evaluation import holdout_split, imputation_errors, outcome_metrics
from .model import impute, load_checkpoint, save_checkpoint
from .optimizer import TrainConfig, train

log = logging.getLogger("scmtf")

METHODS = ("all_at_once", "als", "als_bias")
DEFAULT_GRID = {
    "rank": list(range(10, 33, 2)),
    "lam": [0.5, 0.6, 0.7, 0.8, 0.9],
    "lr": [0.001, 0.01, 0.1],
    "l1": [0.0, 0.001, 0.01, 0.1],
}
RERUN_TOL = 1e-9


class UsageError(Exception):
    pass


class NotReproducedError(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _hash_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _bundle_hash(directory):
    # the bundle manifest also stores run metadata; hash only the arrays
    # and the dataset description
    directory = Path(directory)
    h = hashlib.sha256()
    for f in sorted(directory.glob("*.npy")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    man = json.loads((directory / "manifest.json").read_text())
    man.pop("run", None)
    h.update(json.dumps(man, sort_keys=True).encode())
    return h.hexdigest()


def _args_echo(ns):
    return {k: v for k, v in vars(ns).items() if k not in ("func",)}


def _manifest(ns, inputs, metrics, outputs, seeds):
    return {
        "tool": f"scmtf {__version__}",
        "command": ns.command,
        "args": _args_echo(ns),
        "seeds": seeds,
        "input_hash": inputs,
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "metrics": metrics,
    }


def _write_manifest(out, ns, inputs, metrics, outputs, seeds):
    man = json.loads(json.dumps(_manifest(ns, inputs, metrics, outputs, seeds),
                                default=_json_default))
    (Path(out) / "manifest.json").write_text(json.dumps(man, indent=1))
    return man


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def _clean(x):
    """Replace NaN by None recursively so the JSON stays standard."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _out_dir(ns):
    if not ns.out:
        raise UsageError("--out is required")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(ns):
    return 0 if ns.seed is None else int(ns.seed)


def _load_json_config(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


# -- training core (shared by train, grid, compare) --------------------------

def _fit(d, method, seed, rank, lam, lr, l1, max_steps, holdout, outer_iters=None,
         inner_steps=10):
    """Train one model with a seeded holdout removed from the mask.

    Returns ``(params, history, logreg, holdout_mask)``.
    """
    train_mask, hold = holdout_split(d.mask, holdout, seed)
    dt = d.with_mask(train_mask)
    if method == "all_at_once":
        cfg = TrainConfig(rank=rank, lam=lam, lr=lr, l1_weight=l1, max_steps=max_steps, seed=seed)
        params, hist = train(dt, cfg)
        logreg = None
    elif method in ("als", "als_bias"):
        use_bias = method == "als_bias"
        n_groups = 6 if use_bias else 5
        if outer_iters is None:
            # match the all-at-once step budget
            outer_iters = max(1, max_steps // (n_groups * inner_steps))
        cfg = AlsConfig(rank=rank, lam=lam, lr=lr, l1_weight=l1, outer_iters=outer_iters,
                        inner_steps=inner_steps, use_bias=use_bias, seed=seed)
        params, hist, logreg = train_als(dt, cfg)
    else:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return params, hist, logreg, hold


def _classifier_probs(params, logreg, rows):
    if params.head is not None:
        return clf.predict_proba(params.head, rows)
    if logreg is not None:
        return logreg.predict_proba(rows)
    return None


def _logreg_from_meta(meta):
    lr = meta.get("logreg")
    if not lr:
        return None
    return LogRegParams(np.array(lr["weights"]), np.array(lr["intercepts"]))


def _split_rows(d, name):
    if d.split is None or d.labels is None:
        return None
    idx = d.split_idx(name)
    return idx if idx.size else None


def _score_run(d, params, logreg, hold, split="test"):
    """Holdout imputation errors plus classifier metrics on one split."""
    out = {"imputation": imputation_errors(d.tensor, impute(params), hold)}
    idx = _split_rows(d, split)
    if idx is not None:
        probs = _classifier_probs(params, logreg, params.factors.A[idx])
        if probs is not None:
            m = outcome_metrics(d.labels[idx], probs, OUTCOMES)
            out["classifier"] = m
            out["mean_auc"] = float(np.mean([m[o]["auc"] for o in OUTCOMES]))
    return out


# -- commands ---------------------------------------------------------------

def cmd_synth(ns):
    out = _out_dir(ns)
    conf = _load_json_config(ns.config) if ns.config else {}
    names = {f.name for f in fields(SynthConfig)}
    for key in conf:
        if key not in names:
            raise UsageError(f"unknown synthetic config field {key!r}")
    if ns.seed is not None:
        conf["seed"] = ns.seed
    try:
        cfg = SynthConfig(**conf)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic config: {exc}") from exc
    d, truth = synth_generate(cfg)
    metrics = {"missing_fraction": d.missing_fraction(), "n_patients": d.n_patients,
               "positive_rate": d.labels.mean(axis=0).tolist()}
    ns.seed = cfg.seed
    outputs = ["tensor.npy", "mask.npy", "statics.npy", "labels.npy",
               "ground_truth.json", "complete_tensor.npy"]
    run = json.loads(json.dumps(_manifest(ns, None, metrics, outputs, {"synth": cfg.seed}),
                                default=_json_default))
    # the run record lives inside the bundle manifest: one manifest per directory
    save_bundle(d, out, truth, extra={"run": run, "synth_config": asdict(cfg)})
    return run


def cmd_train(ns):
    out = _out_dir(ns)
    d = load_bundle(ns.data)
    seed = _seed(ns)
    method = ns.method or "all_at_once"
    params, hist, logreg, hold = _fit(d, method, seed, ns.rank, ns.lam, ns.lr, ns.l1,
                                      ns.max_steps, ns.holdout, ns.outer_iters, ns.inner_steps)
    meta = {"method": method, "seed": seed, "holdout_fraction": ns.holdout, "holdout_seed": seed,
            "history_reason": hist.reason, "n_steps": hist.n_steps}
    if logreg is not None:
        meta["logreg"] = {"weights": logreg.weights.tolist(), "intercepts": logreg.intercepts.tolist()}
    save_checkpoint(out / "checkpoint.json", params, normalized=True, **meta)
    hist.method = method
    hist.to_csv(out / "history.csv")
    metrics = {"final_total": float(hist.totals[-1]), "n_steps": hist.n_steps,
               "reason": hist.reason, **_score_run(d, params, logreg, hold, "val")}
    return _write_manifest(out, ns, {"data": _bundle_hash(ns.data)}, _clean(metrics),
                           ["checkpoint.json", "history.csv"], {"train": seed, "holdout": seed})


def _grid_cells(grid):
    for key in DEFAULT_GRID:
        if key not in grid or not grid[key]:
            raise UsageError(f"grid file needs a non-empty list for {key!r}")
    return [dict(zip(DEFAULT_GRID, vals))
            for vals in itertools.product(*(grid[k] for k in DEFAULT_GRID))]


def _grid_worker(job):
    data_dir, cell, method, seed, max_steps, holdout = job
    d = load_bundle(data_dir)
    row = dict(cell)
    try:
        params, hist, logreg, hold = _fit(d, method, seed, int(cell["rank"]), float(cell["lam"]),
                                          float(cell["lr"]), float(cell["l1"]), max_steps, holdout)
        sc = _score_run(d, params, logreg, hold, "val")
        row.update(val_auc=sc.get("mean_auc", float("nan")), mae=sc["imputation"]["mae"],
                   rmse=sc["imputation"]["rmse"], steps=hist.n_steps, error="")
    except (ScmtfError, ArithmeticError, ValueError) as exc:
        row.update(val_auc=float("nan"), mae=float("nan"), rmse=float("nan"), steps=0,
                   error=f"{type(exc).__name__}: {exc}")
    return row


def _rank_key(row):
    auc = row["val_auc"]
    mae = row["mae"]
    return (-(auc if auc == auc else -np.inf), mae if mae == mae else np.inf)


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_grid(ns):
    out = _out_dir(ns)
    grid = _load_json_config(ns.grid) if ns.grid else DEFAULT_GRID
    cells = _grid_cells(grid)
    seed = _seed(ns)
    method = ns.method or "all_at_once"
    jobs = [(str(ns.data), c, method, seed, ns.max_steps, ns.holdout) for c in cells]
    rows = _map(_grid_worker, jobs, ns.workers)
    rows.sort(key=_rank_key)
    cols = ["rank", "lam", "lr", "l1", "val_auc", "mae", "rmse", "steps", "error"]
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    metrics = {"n_cells": len(cells), "n_failed": sum(bool(r["error"]) for r in rows),
               "best": rows[0], "selection": "max mean validation AUC, then min holdout MAE"}
    return _write_manifest(out, ns, {"data": _bundle_hash(ns.data)}, _clean(metrics),
                           ["grid.csv"], {"train": seed, "holdout": seed})


def cmd_evaluate(ns):
    out = _out_dir(ns)
    d = load_bundle(ns.data)
    params, doc = load_checkpoint(ns.checkpoint)
    meta = doc.get("meta", {})
    I, J, K, S = params.factors.shape
    if (I, J, K) != d.dims or S != d.statics.shape[1]:
        raise UsageError(f"checkpoint dims {(I, J, K, S)} do not match dataset")
    frac = meta.get("holdout_fraction", 0.0)
    _, hold = holdout_split(d.mask, frac, meta.get("holdout_seed", 0))
    report = {"imputation": imputation_errors(d.tensor, impute(params), hold),
              "holdout_fraction": frac}
    test = _split_rows(d, "test")
    train_rows = _split_rows(d, "train")
    if test is None or train_rows is None:
        report["classification"] = "skipped: dataset has no labels or split"
        log.warning("classification skipped: dataset has no labels or split")
    else:
        A = params.factors.A
        probs = _classifier_probs(params, _logreg_from_meta(meta), A[test])
        if probs is not None:
            report["nn"] = outcome_metrics(d.labels[test], probs, OUTCOMES)
        rf, rf_top = {}, {}
        fcfg = forest.ForestConfig(n_trees=ns.trees, seed=_seed(ns))
        for o, name in enumerate(OUTCOMES):
            model = forest.fit(A[train_rows], d.labels[train_rows, o], fcfg)
            rf[name] = outcome_metrics(d.labels[test, o:o + 1],
                                       forest.predict_proba(model, A[test])[:, None], (name,))[name]
            top = forest.top_phenotypes(model, ns.top_threshold)
            entry = {"components": top, "importances": model.importances.tolist()}
            if top:
                sub = forest.fit(A[train_rows][:, top], d.labels[train_rows, o], fcfg)
                entry.update(outcome_metrics(d.labels[test, o:o + 1],
                                             forest.predict_proba(sub, A[test][:, top])[:, None],
                                             (name,))[name])
            rf_top[name] = entry
        report["rf"] = rf
        report["rf_top"] = rf_top
    report = _clean(report)
    (out / "metrics.json").write_text(json.dumps(report, indent=1))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "outcome", "metric", "value"])
        for model in ("nn", "rf", "rf_top"):
            for name, m in report.get(model, {}).items():
                for key in ("auc", "f1", "precision", "recall"):
                    if key in m:
                        w.writerow([model, name, key, m[key]])
        for key in ("mae", "rmse", "n"):
            w.writerow(["imputation", "", key, report["imputation"][key]])
    inputs = {"data": _bundle_hash(ns.data), "checkpoint": _hash_file(ns.checkpoint)}
    return _write_manifest(out, ns, inputs, report, ["metrics.json", "metrics.csv"],
                           {"forest": _seed(ns), "holdout": meta.get("holdout_seed", 0)})


def cmd_phenotypes(ns):
    out = _out_dir(ns)
    d = load_bundle(ns.data)
    params, _ = load_checkpoint(ns.checkpoint)
    f = params.factors
    fnames = d.feature_names
    snames = d.static_names
    rule = json.loads(ns.rule) if ns.rule else None
    rep = phenotypes.build_report(f, fnames, snames, d.labels, rule, ns.threshold)
    traj = list(range(d.dims[1])) if ns.trajectories else []
    paths = phenotypes.write_report(rep, out, d, params.biases, fnames, traj)
    metrics = {"n_phenotypes": len(rep.phenotypes), "membership_rule": rep.rule,
               "weights": [ph.weight for ph in rep.phenotypes]}
    inputs = {"data": _bundle_hash(ns.data), "checkpoint": _hash_file(ns.checkpoint)}
    return _write_manifest(out, ns, inputs, metrics, paths, {})


def _compare_worker(job):
    data_dir, method, seed, kw = job
    d = load_bundle(data_dir)
    try:
        params, hist, logreg, hold = _fit(d, method, seed, **kw)
        sc = _score_run(d, params, logreg, hold, "test")
        row = {"method": method, "seed": seed, "mae": sc["imputation"]["mae"],
               "rmse": sc["imputation"]["rmse"], "error": ""}
        for o in OUTCOMES:
            row[f"auc_{o}"] = sc.get("classifier", {}).get(o, {}).get("auc", float("nan"))
    except (ScmtfError, ArithmeticError, ValueError) as exc:
        log.error("run %s seed %d failed: %s", method, seed, exc)
        row = {"method": method, "seed": seed, "mae": float("nan"), "rmse": float("nan"),
               "error": f"{type(exc).__name__}: {exc}"}
        for o in OUTCOMES:
            row[f"auc_{o}"] = float("nan")
    return row


def cmd_compare(ns):
    out = _out_dir(ns)
    methods = ns.methods or ([ns.method] if ns.method else list(METHODS))
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    if ns.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    base = _seed(ns)
    seeds = [base + i for i in range(ns.n_seeds)]
    kw = dict(rank=ns.rank, lam=ns.lam, lr=ns.lr, l1=ns.l1, max_steps=ns.max_steps,
              holdout=ns.holdout, outer_iters=ns.outer_iters, inner_steps=ns.inner_steps)
    jobs = [(str(ns.data), m, s, kw) for s in seeds for m in methods]
    runs = _map(_compare_worker, jobs, ns.workers)
    metric_names = [f"auc_{o}" for o in OUTCOMES] + ["mae", "rmse"]
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "seed", *metric_names, "error"])
        w.writeheader()
        for r in runs:
            w.writerow(r)
    summary = {}
    for m in methods:
        ok = [r for r in runs if r["method"] == m and not r["error"]]
        summary[m] = {}
        for k in metric_names:
            vals = np.array([r[k] for r in ok], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            summary[m][k] = {"mean": float(vals.mean()) if vals.size else float("nan"),
                             "sd": float(vals.std(ddof=1)) if vals.size > 1 else float("nan"),
                             "n": int(vals.size)}
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *(f"{m}_{s}" for m in methods for s in ("mean", "sd"))])
        for k in metric_names:
            w.writerow([k, *(repr(summary[m][k][s]) for m in methods for s in ("mean", "sd"))])
    metrics = {"summary": summary, "n_failed": sum(bool(r["error"]) for r in runs)}
    return _write_manifest(out, ns, {"data": _bundle_hash(ns.data)}, _clean(metrics),
                           ["runs.csv", "comparison.csv"], {"runs": seeds})


def _flatten(x, prefix=""):
    if isinstance(x, dict):
        for k, v in x.items():
            yield from _flatten(v, f"{prefix}{k}.")
    elif isinstance(x, list):
        for i, v in enumerate(x):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix.rstrip("."), x


def compare_metrics(a, b, tol=RERUN_TOL):
    """List of ``(key, old, new)`` where two metric trees disagree beyond ``tol``."""
    fa, fb = dict(_flatten(a)), dict(_flatten(b))
    bad = []
    for k in sorted(set(fa) | set(fb)):
        x, y = fa.get(k), fb.get(k)
        if isinstance(x, (int, float)) and isinstance(y, (int, float)) \
                and not isinstance(x, bool) and not isinstance(y, bool):
            if not (abs(x - y) <= tol or (math.isnan(x) and math.isnan(y))):
                bad.append((k, x, y))
        elif x != y:
            bad.append((k, x, y))
    return bad


def cmd_rerun(ns):
    src = Path(ns.manifest)
    man = json.loads(src.read_text())
    if "run" in man:            # dataset bundle: run record is nested
        man = man["run"]
    args = dict(man["args"])
    args["out"] = ns.out or str(Path(src).parent / "rerun")
    old_hash = man.get("input_hash")
    replay = argparse.Namespace(**args)
    replay.func = COMMANDS[args["command"]]
    new = replay.func(replay)
    if old_hash and new.get("input_hash") != old_hash:
        log.warning("input hash changed since the original run")
    bad = compare_metrics(man["metrics"], new["metrics"])
    for k, x, y in bad[:20]:
        print(f"mismatch {k}: {x} != {y}", file=sys.stderr)
    if bad:
        raise NotReproducedError(f"{len(bad)} metric(s) differ by more than {RERUN_TOL}")
    print("reproduced")
    return new


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "grid": cmd_grid, "evaluate": cmd_evaluate,
    "phenotypes": cmd_phenotypes, "compare": cmd_compare, "rerun": cmd_rerun,
}


# -- parser -----------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--method", choices=METHODS, default=None,
                   help="training method (default all_at_once)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", default=None, help="output directory")


def _hyper(p, max_steps=5000):
    p.add_argument("--rank", type=int, default=28)
    p.add_argument("--lam", type=float, default=0.7, help="classifier weight in [0, 1]")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l1", type=float, default=0.001, help="l1 sparsity weight")
    p.add_argument("--max-steps", type=int, default=max_steps)
    p.add_argument("--holdout", type=float, default=0.05,
                   help="fraction of observed cells held out for imputation scoring")
    p.add_argument("--outer-iters", type=int, default=None,
                   help="ALS outer iterations (default: match --max-steps)")
    p.add_argument("--inner-steps", type=int, default=10, help="ALS steps per block visit")


def build_parser():
    ap = argparse.ArgumentParser(prog="scmtf", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort bundle")
    p.add_argument("--config", help="JSON file of synthetic-cohort settings")
    _common(p)

    p = sub.add_parser("train", help="train one model on a bundle")
    p.add_argument("--data", required=True)
    _hyper(p)
    _common(p)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="JSON file with lists for rank, lam, lr, l1")
    p.add_argument("--max-steps", type=int, default=5000)
    p.add_argument("--holdout", type=float, default=0.05)
    _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--top-threshold", type=float, default=0.10)
    _common(p)

    p = sub.add_parser("phenotypes", help="phenotype report from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.2, help="display threshold")
    p.add_argument("--rule", help='membership rule as JSON, e.g. \'{"kind": "quantile", "q": 0.75}\'')
    p.add_argument("--trajectories", action="store_true", help="also write member trajectories")
    _common(p)

    p = sub.add_parser("compare", help="paired-seed method comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", nargs="+", default=None)
    p.add_argument("--n-seeds", type=int, default=10)
    _hyper(p)
    _common(p)

    p = sub.add_parser("rerun", help="replay a manifest and check its metrics")
    p.add_argument("--manifest", required=True)
    _common(p)
    return ap


def main(argv=None):
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ns.func = COMMANDS[ns.command]
    try:
        ns.func(ns)
    except UsageError as exc:
        print(f"scmtf {ns.command}: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NotReproducedError) as exc:
        print(f"scmtf {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ScmtfError, FileNotFoundError) as exc:
        print(f"scmtf {ns.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
