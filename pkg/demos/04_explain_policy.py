"""
Which observations drive the policy?
====================================

Kernel SHAP over the six observation features (region sizes, amyloid loads
and last year's information processing) for a trained TRPO policy. With six
features every one of the 64 coalitions is enumerated, so the values are
exact Shapley values against the background distribution.

Run ``03_train_trpo.py`` first; it leaves ``trpo_fold2.npz`` behind.
"""

from pathlib import Path

import numpy as np

from adprogress import explain
from adprogress.brainsim import BrainGraph
from adprogress.cohort import SynthSpec, generate_synthetic_cohort, kfold_split, patient_params
from adprogress.neural import load_snapshot

if not Path("trpo_fold2.npz").is_file():
    raise SystemExit("trpo_fold2.npz not found: run demos/03_train_trpo.py first")

graph = BrainGraph.two_region()
features, actions = graph.feature_names(), graph.action_names()
snapshot = load_snapshot("trpo_fold2.npz")
cohort = generate_synthetic_cohort(SynthSpec(), seed=0).cohort
fold = kfold_split(cohort, k=5, seed=0)[2]
train_set, test_set = cohort.subset(fold.train), cohort.subset(fold.test)

# %%
# Features missing from a coalition are filled in from up to 100 states the
# policy itself visits on training patients.

background = explain.policy_background(snapshot, train_set, [patient_params(p) for p in train_set], graph)
print("background rows:", len(background.data))

# %%
# One patient, year by year. phi0 plus the row sums reproduce the action.

patient = test_set[0]
attrs = explain.explain_trajectory(snapshot, patient, patient_params(patient), graph, background)
print(f"\n{patient.patient_id}: attributions for {actions[0]}")
print("year " + " ".join(f"{f:>10}" for f in features) + "      action")
for a in attrs:
    print(f"{a.year:4d} " + " ".join(f"{v:10.4f}" for v in a.phi[:, 0]) + f"  {a.output[0]:10.4f}")
print("worst efficiency gap:", max(a.efficiency_gap() for a in attrs))

# %%
# Global view over every test patient: rank features by mean |phi|.

every = []
for p in test_set:
    every += explain.explain_trajectory(snapshot, p, patient_params(p), graph, background, fold=2, seed=0)
glob = explain.aggregate_global(every, features, actions)
print(f"\nglobal ranking over {glob.count} decision states")
for name, value in glob.ranking():
    print(f"  {name:10s} {value:.4f}")

path = explain.export_attributions(every, "attributions_fold2.csv", features, actions)
print("written", path)
