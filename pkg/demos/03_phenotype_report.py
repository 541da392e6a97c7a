"""From a trained model to a phenotype report.

A random forest on the patient-membership matrix scores each phenotype for
each outcome. Phenotypes with importance of at least 0.10 are kept as "top",
and for these we list the contributing features and the share of member
patients with a positive outcome. The report files land in ``demo_out/``.

    python3 demos/03_phenotype_report.py
"""
from pathlib import Path

from scmtf import forest, phenotypes
from scmtf.data import SynthConfig, synth_generate
from scmtf.evaluation import factor_congruence
from scmtf.optimizer import TrainConfig, train

cohort, truth = synth_generate(SynthConfig(missing_fraction=0.75, seed=3))
cohort.feature_names = [f"lab_{j:02d}" for j in range(cohort.dims[1])]
cohort.static_names = [f"static_{s:02d}" for s in range(cohort.statics.shape[1])]

params, _ = train(cohort, TrainConfig(rank=5, lam=0.7, seed=4))
_, _, perm = factor_congruence(params.factors, truth.factors)
planted_at = {int(e): s for s, e in enumerate(perm)}

report = phenotypes.build_report(params.factors, cohort.feature_names, cohort.static_names,
                                 cohort.labels)
A, train_rows = params.factors.A, cohort.train_idx
for o, outcome in enumerate(("persist_yr2", "persist_yr3")):
    rf = forest.fit(A[train_rows], cohort.labels[train_rows, o], forest.ForestConfig(seed=o))
    top = forest.top_phenotypes(rf, 0.10)
    print(f"\n{outcome}: top phenotypes {top} "
          f"(planted components {[planted_at[s] for s in top]}, truth uses {truth.label_driving})")
    for s in top:
        ph = report.phenotypes[s]
        frac = report.positive_fractions[s]
        feats = ", ".join(f"{n} {v:.2f}" for n, v in ph.temporal_contributions[:4]) or "none above 0.2"
        print(f"  phenotype {s}: importance {rf.importances[s]:.2f}, weight {ph.weight:.2f}, "
              f"{frac['n_members']} members, positive fraction {frac['fractions'][o]:.2f}")
        print(f"    temporal features: {feats}")

summary = phenotypes.bias_summary(params.biases, cohort.feature_names)
print(f"\npatient bias mean {summary['patient_mean']:.3f} sd {summary['patient_sd']:.3f}; "
      f"largest feature biases {summary['feature_table'][:2]}")

out = Path("demo_out/phenotypes")
paths = phenotypes.write_report(report, out, cohort, params.biases, cohort.feature_names, (0, 1))
print(f"wrote {', '.join(p.name for p in paths)} to {out}/")
