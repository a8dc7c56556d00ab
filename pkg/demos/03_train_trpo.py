"""
Learning the allocation policy with TRPO
========================================

Train a Gaussian policy on one fold of the synthetic cohort and use it to
predict ten-year cognition for unseen patients from their baseline alone.
The policy network and a snapshot of it are saved next to this script's
working directory.

Takes about 15 seconds on one core.
"""

import numpy as np

from adprogress.agents import AgentConfig, train
from adprogress.brainsim import BrainGraph
from adprogress.cohort import SynthSpec, fit_scaler, generate_synthetic_cohort, kfold_split, patient_params
from adprogress.harness import rollout_predictions, score
from adprogress.neural import load_snapshot, save_snapshot

graph = BrainGraph.two_region()
cohort = generate_synthetic_cohort(SynthSpec(), seed=0).cohort
fold = kfold_split(cohort, k=5, seed=0)[2]
train_set, val_set, test_set = (cohort.subset(ids) for ids in (fold.train, fold.validation, fold.test))

# %%
# Default settings are 1000 environment steps per epoch (100 ten-year
# episodes on random training patients) and a KL trust region of 0.01.

cfg = AgentConfig(kind="TRPO", total_epochs=200, seed=0)
result = train(cfg, train_set, val_set, graph, scaler=fit_scaler(train_set, graph),
               rng=np.random.default_rng(0))

for row in result.curve[::20] + [result.curve[-1]]:
    print(f"epoch {row['epoch']:3d}  mean return {row['mean_return']:9.2f}  val MAE {row['validation_mae']:.3f}")
print("kept the snapshot from epoch", result.best_epoch)

accepted = sum(s["accepted"] for s in result.update_stats)
print(f"{accepted} of {len(result.update_stats)} trust-region steps accepted,"
      f" largest KL {max(s['kl'] for s in result.update_stats):.4f}")

# %%
# Held-out patients: roll the deterministic policy forward from baseline.

params = [patient_params(p) for p in test_set]
preds = rollout_predictions(result.snapshot, test_set, params, graph)
mae, mse = score(preds, test_set)
print(f"\ntest MAE {mae:.3f}  MSE {mse:.3f}  (0-10 scale, {len(test_set)} patients)")

for pred, rec in list(zip(preds, test_set))[:4]:
    print(rec.patient_id, "observed ", np.round(rec.normalized_scores(), 1))
    print(" " * len(rec.patient_id), "predicted", np.round(pred.cognition, 1))

# %%
# Snapshots are self-contained: weights, scaler bounds and action limit.

path = save_snapshot(result.snapshot, "trpo_fold2.npz")
again = load_snapshot(path)
same = rollout_predictions(again, test_set, params, graph)
print("\nreloaded snapshot reproduces predictions:",
      all(np.array_equal(a.cognition, b.cognition) for a, b in zip(preds, same)))
