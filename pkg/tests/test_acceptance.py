"""End-to-end acceptance checks, one test per criterion.

The heavy criteria (6 and 8) share a single cross-validated four-agent run.
``conftest.py`` prints a PASS/FAIL line per criterion at the end of the session.
"""
import math
import time
from dataclasses import replace
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from adprogress import brainsim
from adprogress.agents.core import AgentConfig, CohortEnv, collect_rollouts, conjugate_gradient
from adprogress.agents.trpo import trpo_update
from adprogress.brainsim import BrainGraph, BrainState, EnvConfig, ModelParams
from adprogress.cohort import SynthSpec, fit_scaler, generate_synthetic_cohort, patient_params
from adprogress.explain import (BackgroundSet, aggregate_global, exact_shapley, kernel_shap,
                                read_attributions)
from adprogress.harness import (ExperimentConfig, explain_saved_runs, global_ranking, read_rows,
                                run_experiment)
from adprogress.neural import (Adam, GaussianPolicy, finite_diff_check, forward, gaussian_sample,
                               mlp_init, squashed_gaussian_logprob)

FEATURES = BrainGraph.two_region().feature_names()


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_diffusion_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    d0 = rng.uniform(0.0, 3.0, (100, 2))
    beta, w, t = rng.uniform(0, 0.5, 100), rng.uniform(0.5, 2.0, 100), rng.uniform(0, 10, 100)
    # H(w) = w * H(1), so the Euler iteration for (beta, w, t) in n steps is the one for
    # rate beta * w * t over unit time; all cases then integrate in a single batched call
    unit = brainsim.laplacian([[0.0, 1.0], [1.0, 0.0]])
    substeps = 50_000  # >= 5000 per year for t <= 10
    got = brainsim.diffuse_amyloid(d0, unit, beta * w * t, 1.0, substeps)
    elapsed = time.perf_counter() - t0
    want = np.stack([brainsim.closed_form_diffusion_2node(d0[i], w[i], beta[i], t[i]) for i in range(100)])
    rel = np.linalg.norm(got - want, axis=1) / np.linalg.norm(want, axis=1)
    assert rel.max() <= 1e-4, rel.max()
    assert elapsed < 1.0, elapsed

    # unbatched spot check at exactly 1000 substeps per year
    H = brainsim.laplacian([[0.0, w[0]], [w[0], 0.0]])
    one = brainsim.diffuse_amyloid(d0[0], H, beta[0], t[0], math.ceil(1000 * t[0]))
    assert np.linalg.norm(one - want[0]) / np.linalg.norm(want[0]) <= 1e-4


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_gradients_and_squashed_density():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 7)) for _ in range(depth + 1)]
        net = mlp_init(sizes, seed=int(rng.integers(2**31)))
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        worst = max(worst, finite_diff_check(net, x, rng=rng))
    assert worst < 1e-4, worst

    limit = 2.0
    for mean, log_std in [(0.0, 0.0), (0.7, -1.0), (-1.5, 0.5), (2.0, 1.0)]:
        # integrate over the pre-tanh variable u so the endpoint spikes are resolved;
        # beyond |u| = 15 tanh rounds to 1 and the remaining mass is below 1e-6 here
        sd = math.exp(log_std)
        u = np.linspace(max(mean - 12 * sd, -15.0), min(mean + 12 * sd, 15.0), 200_001)
        a = limit * np.tanh(u)
        dens = np.exp(squashed_gaussian_logprob(a[:, None], np.array([mean]), np.array([log_std]), limit))
        mass = np.trapezoid(dens * limit * (1 - np.tanh(u) ** 2), u)
        assert abs(mass - 1.0) < 0.01, (mean, log_std, mass)


# -- 3 ----------------------------------------------------------------------

def brute_shapley(f, x, base, n):
    """Permutation-free subset formula over coalition means of a single background row."""
    def v(S):
        z = base.copy()
        z[list(S)] = x[list(S)]
        return f(z[None, :])[0]
    phi = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for k in range(n):
            w = math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
            for S in combinations(others, k):
                phi[i] += w * (v(S + (i,)) - v(S))
    return phi


def random_model(rng, n):
    net = mlp_init([n, 5, 1], seed=int(rng.integers(2**31)))
    return lambda X: forward(net, np.atleast_2d(X))[0][:, 0]


def test_criterion_3_shapley_axioms():
    rng = np.random.default_rng(3)
    tol = 1e-6
    for trial in range(50):
        n = int(rng.integers(2, 7))
        f, g = random_model(rng, n), random_model(rng, n)
        x = rng.normal(size=n)
        bg = BackgroundSet(rng.normal(size=(int(rng.integers(1, 6)), n)))
        phi = exact_shapley(f, x, bg, action_index=0)
        total = f(x[None])[0] - float(np.mean(f(bg.data)))
        assert abs(phi.sum() - total) <= tol  # efficiency

        # a feature the model never reads gets zero
        dummy = lambda X, f=f: f(np.concatenate([np.asarray(X)[:, :-1], np.zeros((len(X), 1))], axis=1))  # noqa: E731
        assert abs(exact_shapley(dummy, x, bg, 0)[-1]) <= tol

        # symmetric model under swapping features 0 and 1, evaluated where x0 == x1
        sym = lambda X, f=f: f(X) + f(np.asarray(X)[:, [1, 0, *range(2, n)]])  # noqa: E731
        xs = x.copy()
        xs[1] = xs[0]
        bgs = BackgroundSet(np.repeat(bg.data[:1], 2, axis=0))
        bgs.data[:, 1] = bgs.data[:, 0]
        ps = exact_shapley(sym, xs, bgs, 0)
        assert abs(ps[0] - ps[1]) <= tol

        # linearity
        a, b = rng.normal(size=2)
        combo = lambda X, f=f, g=g, a=a, b=b: a * f(X) + b * g(X)  # noqa: E731
        lhs = exact_shapley(combo, x, bg, 0)
        rhs = a * phi + b * exact_shapley(g, x, bg, 0)
        assert np.max(np.abs(lhs - rhs)) <= tol

        # kernel SHAP in exact-enumeration mode
        kphi, _ = kernel_shap(f, x, bg, action_index=0, mode="exact")
        assert np.max(np.abs(kphi - phi)) <= tol

        # independent subset-formula oracle on a single-row background
        if trial % 5 == 0:
            one = BackgroundSet(bg.data[:1])
            np.testing.assert_allclose(exact_shapley(f, x, one, 0), brute_shapley(f, x, bg.data[0], n),
                                       atol=tol)

    for _ in range(50):
        n = int(rng.integers(1, 7))
        w, x = rng.normal(size=n), rng.normal(size=n)
        bg = BackgroundSet(rng.normal(size=(4, n)))
        phi = exact_shapley(lambda X, w=w: np.asarray(X) @ w, x, bg, 0)
        assert np.max(np.abs(phi - w * (x - bg.means))) <= 1e-9


# -- 4 ----------------------------------------------------------------------

def kl_new_old(mu_new, ls_new, mu_old, ls_old):
    var_new, var_old = np.exp(2 * ls_new), np.exp(2 * ls_old)
    per_dim = ls_old - ls_new + (var_new + (mu_new - mu_old) ** 2) / (2 * var_old) - 0.5
    return float(np.mean(per_dim.sum(axis=-1)))


def test_criterion_4_trust_region():
    synth = generate_synthetic_cohort(SynthSpec(), seed=0).cohort
    patients = list(synth)
    params = [patient_params(p) for p in patients]
    graph, env_cfg = BrainGraph.two_region(), EnvConfig()
    env = CohortEnv(patients, params, graph, env_cfg, fit_scaler(patients, graph, env_cfg))
    cfg = AgentConfig(kind="TRPO", total_epochs=50)
    rng = np.random.default_rng(4)
    policy = GaussianPolicy.create([6, *cfg.hidden_sizes, 2], 1, cfg.init_std)
    value = mlp_init([6, *cfg.hidden_sizes, 1], 2)
    value_opt = Adam(value.n_params, cfg.value_lr)

    accepted = 0
    for _ in range(cfg.total_epochs):
        batch = collect_rollouts(env, lambda o, r: gaussian_sample(policy, o, r),
                                 lambda o: forward(value, o)[0][:, 0], cfg.batch_size, rng,
                                 cfg.gamma_disc, cfg.lambda_gae)
        mu_old, ls_old = policy.mean(batch.obs), policy.log_std.copy()
        stats = trpo_update(policy, value, value_opt, batch, cfg, rng)
        if not stats["accepted"]:
            continue
        accepted += 1
        mu_new, ls_new = policy.mean(batch.obs), policy.log_std
        assert kl_new_old(mu_new, ls_new, mu_old, ls_old) <= 1.5 * cfg.kl_bound
        adv = batch.advantages
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        logr = (-0.5 * ((batch.actions - mu_new) / np.exp(ls_new)) ** 2 - ls_new
                + 0.5 * ((batch.actions - mu_old) / np.exp(ls_old)) ** 2 + ls_old).sum(axis=1)
        assert np.mean(np.exp(logr) * adv) - np.mean(adv) >= 0
    assert accepted >= 25, accepted

    rng = np.random.default_rng(40)
    for _ in range(20):
        M = rng.normal(size=(20, 20))
        A = M @ M.T + 20 * np.eye(20)
        b = rng.normal(size=20)
        x = conjugate_gradient(lambda v, A=A: A @ v, b, iters=100, tol=1e-12)
        assert np.linalg.norm(A @ x - b) < 1e-8


# -- 5 ----------------------------------------------------------------------

def test_criterion_5_environment_invariants():
    # 1000 lockstep environments x 100 randomized steps = 1e5 transitions
    rng = np.random.default_rng(5)
    graph = BrainGraph.two_region()
    cfg = EnvConfig(horizon=10_000)
    E = 1000
    params = ModelParams(alpha1=rng.uniform(0, 0.5, E), alpha2=rng.uniform(0, 0.5, E),
                         beta=rng.uniform(0, 0.5, E), gamma_act=rng.uniform(0, 5, E),
                         lambda_tradeoff=rng.uniform(0, 1500, E))
    state = BrainState(0, rng.uniform(0.05, 10, (E, 2)), rng.uniform(0, 3, (E, 2)),
                       rng.uniform(0, 5, (E, 2)), np.zeros((E, 2)))
    for _ in range(100):
        out = brainsim.env_step(state, rng.uniform(-5, 5, (E, 2)), params, graph, cfg)
        nxt = out.next_state
        assert np.all(np.abs(out.reward) <= 2000.0)
        assert np.all(nxt.info_prev.sum(axis=1) <= 10.0 * (1 + 1e-12)) and np.all(nxt.info_prev >= 0)
        assert np.all(nxt.size <= state.size)
        mass0, mass1 = state.amyloid.sum(axis=1), nxt.amyloid.sum(axis=1)
        assert np.all(np.abs(mass1 - mass0) <= 1e-9 * np.maximum(1.0, mass0))
        state = nxt


# -- 6 and 8 share one cross-validated run ------------------------------------

FULL_OVERRIDES = {"TRPO": {"total_epochs": 200}, "PPO": {"total_epochs": 200},
                  "DDPG": {"total_epochs": 10}, "SAC": {"total_epochs": 10}}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    cfg = ExperimentConfig(agents=["TRPO", "PPO", "DDPG", "SAC"], k=5, seeds=1, out_dir=str(out),
                           agent_overrides=FULL_OVERRIDES, explain_scope="test")
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    return cfg, res, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_end_to_end_learning(full_run):
    cfg, res, elapsed = full_run
    trpo = [r for r in res.runs if r.agent == "TRPO"]
    assert len(trpo) == 5 and all(r.ok for r in trpo)
    for r in trpo:
        curve = read_rows(Path(r.run_dir) / "curve.csv")
        assert len(curve) == 200
        first = float(curve[0]["mean_return"])
        at_best = float(curve[r.best_epoch - 1]["mean_return"])
        assert at_best > first, (r.fold, first, at_best)
    mae = float(np.mean([r.mae for r in trpo]))
    print(f"\nTRPO per-fold test MAE: {[round(r.mae, 3) for r in trpo]}  mean {mae:.3f}")
    print("agent   MMSE MAE         MMSE MSE")
    for row in res.summary:
        print(f"{row['agent']:<7} {row['MMSE_MAE']:<16} {row['MMSE_MSE']}")
    print(f"wall time {elapsed:.0f} s")
    assert {row["agent"] for row in res.summary} == {"TRPO", "PPO", "DDPG", "SAC"}
    assert all("(" in row["MMSE_MAE"] for row in res.summary)
    assert mae <= 1.0
    assert elapsed < 30 * 60


# -- 7 ----------------------------------------------------------------------

def smoke_config(out):
    return ExperimentConfig(agents=["TRPO"], k=2, seeds=1, epochs=10, out_dir=str(out))


def test_criterion_7_reproducibility(tmp_path):
    t0 = time.perf_counter()
    run_experiment(smoke_config(tmp_path / "a"))
    run_experiment(smoke_config(tmp_path / "b"))
    elapsed = time.perf_counter() - t0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name in ("metrics.csv", "attributions.csv", "summary.csv"))
    assert any(p.name == "attributions.csv" for p in files) and any(p.name == "metrics.csv" for p in files)
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    assert elapsed < 60, elapsed


# -- 8 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_explanation_pipeline(full_run):
    cfg, res, _ = full_run
    written = explain_saved_runs(replace(cfg, explain_scope="cohort"), agents=["TRPO"])
    attrs, feats, acts = read_attributions(written["TRPO"])
    assert feats == FEATURES and len(acts) == 2
    # every patient explained once per fold snapshot
    assert len(attrs) == 160 * 5 * 10
    assert max(a.efficiency_gap() for a in attrs) <= 1e-6

    glob = aggregate_global(attrs, feats, acts)
    total = np.zeros_like(attrs[0].phi)
    for a in attrs:
        total = total + a.phi
    assert glob.sum_phi.tobytes() == total.tobytes()
    exact = np.array([[math.fsum(a.phi[i, j] for a in attrs) for j in range(2)] for i in range(6)])
    np.testing.assert_allclose(glob.sum_phi, exact, rtol=0, atol=1e-9)

    for agent in cfg.agents:
        ranking = global_ranking(Path(cfg.out_dir) / "shap" / agent / "attributions.csv")
        assert sorted(n for n, _ in ranking) == sorted(FEATURES), agent
    print("\nTRPO cohort-scope ranking:", ", ".join(f"{n} {s:.4f}" for n, s in
                                                 aggregate_global(attrs, feats, acts).ranking()))
