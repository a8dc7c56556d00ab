"""
Two-region brain dynamics
=========================

One simulated patient, ten years. Amyloid spreads between the hippocampus
(HC) and prefrontal cortex (PFC) along the connectivity graph, both regions
shrink under amyloid load and metabolic activity, and every year the brain
chooses how much information each region processes.

Run with ``python demos/01_brain_dynamics.py``.
"""

import numpy as np

from adprogress import brainsim
from adprogress.brainsim import BrainGraph, ModelParams

# %%
# The graph is two nodes joined by one edge; the Laplacian drives diffusion.

graph = BrainGraph.two_region()
print("regions:", graph.region_names)
print("Laplacian:\n", graph.laplacian)

# %%
# Rate constants for one patient. alpha1 couples atrophy to amyloid, alpha2 to
# activity, beta sets how fast amyloid evens out, gamma_act converts processed
# information into activity per unit of region size.

params = ModelParams(alpha1=0.08, alpha2=0.01, beta=0.12, gamma_act=2.8)


class Patient:
    baseline_size = (3.0, 6.5)
    baseline_amyloid = (2.2, 1.0)
    baseline_cognition = 8.5


state = brainsim.env_reset(Patient, params, graph)
print("baseline info split:", state.info_prev.round(3))

# %%
# Amyloid alone: with no atrophy the regional loads converge to their mean
# and the total is conserved.

d = np.array(Patient.baseline_amyloid)
for year in (1, 5, 20):
    euler = brainsim.diffuse_amyloid(d, graph.laplacian, params.beta, float(year), 100 * year)
    exact = brainsim.closed_form_diffusion_2node(d, 1.0, params.beta, float(year))
    print(f"year {year:2d}: euler {euler.round(4)}  exact {exact.round(4)}  total {euler.sum():.6f}")

# %%
# Full episode under the cost-efficient allocation: each year, regions whose
# marginal reward lambda - gamma/X is positive are filled first.

batch = brainsim.reset_batch([Patient], graph)
traj = brainsim.simulate(batch, lambda s: brainsim.cost_efficient_action(s, params), params, graph)

print("\nyear  X_HC   X_PFC  D_HC   D_PFC  I_HC   I_PFC  cognition")
for t in range(11):
    x, dd, info = traj["size"][0, t], traj["amyloid"][0, t], traj["info"][0, t]
    print(f"{t:4d}  {x[0]:.3f}  {x[1]:.3f}  {dd[0]:.3f}  {dd[1]:.3f}  "
          f"{info[0]:.3f}  {info[1]:.3f}  {traj['cognition'][0, t]:.3f}")

# %%
# Doing nothing (keeping last year's split) for comparison. The reward trades
# the cognitive shortfall against the energetic cost of activity.

idle = brainsim.simulate(batch, lambda s: np.zeros_like(s.info_prev), params, graph)
print("\nreturn, cost-efficient:", traj["reward"][0].sum().round(3))
print("return, hold allocation:", idle["reward"][0].sum().round(3))
