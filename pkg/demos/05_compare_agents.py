"""
Four agents, cross-validated
============================

The experiment harness trains TRPO, PPO, DDPG and SAC on every fold, scores
their test-set trajectories and writes a summary table plus attributions.
Off-policy agents do a gradient update per environment step, so they get
fewer epochs here to keep the run to a few minutes.

Results land in ``compare_agents_out/``; ``adprogress report
compare_agents_out`` prints them again later.
"""

from adprogress.harness import ExperimentConfig, compare_agents, global_ranking, run_experiment

cfg = ExperimentConfig(
    agents=["TRPO", "PPO", "DDPG", "SAC"],
    k=5,
    seeds=1,
    agent_overrides={"TRPO": {"total_epochs": 200}, "PPO": {"total_epochs": 200},
                     "DDPG": {"total_epochs": 10}, "SAC": {"total_epochs": 10}},
    explain_scope="test",
    out_dir="compare_agents_out",
)
result = run_experiment(cfg)

# %%
# Mean (std) over folds on the 0-10 scale.

print("agent  MAE             MSE")
for row in result.summary:
    print(f"{row['agent']:<6} {row['MMSE_MAE']:<15} {row['MMSE_MSE']}")

# %%
# Ordering with pairwise MAE differences. No significance test: five runs
# per agent is too few to say much.

for line in compare_agents(result).lines():
    print(line)

# %%
# What each agent pays attention to.

for agent in cfg.agents:
    ranking = global_ranking(result.out_dir / "shap" / agent / "attributions.csv")
    print(agent, " > ".join(name for name, _ in ranking))
