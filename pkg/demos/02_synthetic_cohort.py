"""
A synthetic cohort
==================

160 patients with sampled baselines and rate constants. Their noiseless
trajectories come from the cost-efficient allocation; follow-up scores get a
little Gaussian noise. We look at the spread of trajectories, the
cross-validation folds and the observation scaler.
"""

import numpy as np

from adprogress.cohort import SynthSpec, fit_scaler, generate_synthetic_cohort, kfold_split, save_cohort

synth = generate_synthetic_cohort(SynthSpec(), seed=0)
cohort = synth.cohort
print(len(cohort), "patients, score kind", cohort.score_kind)

# %%
# Trajectories on the 0-10 scale. Cognition typically rises while the brain
# ramps up processing and then falls as atrophy accumulates.

clean = synth.clean
for q in (10, 50, 90):
    print(f"p{q:02d}:", np.percentile(clean, q, axis=0).round(2))

drop = clean[:, 0] - clean[:, -1]
print("patients declining over ten years:", int((drop > 0).sum()))

# %%
# The first few records as they would appear in the cohort CSV.

for rec in list(cohort)[:3]:
    p = rec.params_override
    print(rec.patient_id, round(rec.demographics.age, 1), rec.baseline_size,
          f"alpha1={p.alpha1:.3f} alpha2={p.alpha2:.4f}", rec.scores[:4])

# %%
# Five folds, each 64:16:20 train/validation/test.

folds = kfold_split(cohort, k=5, seed=0)
for f in folds:
    print(f"fold {f.fold_index}: train {len(f.train)}  val {len(f.validation)}  test {len(f.test)}")

# %%
# The observation scaler is fit on baseline states only. Later states drift
# outside [0, 1] and are left unclamped.

train = cohort.subset(folds[0].train)
scaler = fit_scaler(train)
print("scaler low :", scaler.low.round(3))
print("scaler high:", scaler.high.round(3))

path = save_cohort(cohort, "synthetic_cohort.csv")
print("written", path)
