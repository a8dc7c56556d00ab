"""Trust-region policy optimization for a diagonal Gaussian policy."""

from __future__ import annotations

import numpy as np

from ..neural import Adam, GaussianPolicy, Network, backward, diag_gauss_kl, forward, gaussian_logprob, jvp
from .core import AgentConfig, RolloutBatch, conjugate_gradient, fit_value, logprob_grad


def mean_kl(policy: GaussianPolicy, obs, mu_old, log_std_old) -> float:
    """Average ``KL(pi_new(.|s) || pi_old(.|s))`` over the batch states."""
    mu = policy.mean(obs)
    return float(np.mean(diag_gauss_kl(mu, np.exp(policy.log_std), mu_old, np.exp(log_std_old))))


def kl_grad(policy: GaussianPolicy, obs, mu_old, log_std_old) -> np.ndarray:
    """Reverse-mode gradient of :func:`mean_kl` with respect to the new policy."""
    mu, cache = forward(policy.mean_net, obs)
    n = len(obs)
    var_old = np.exp(2.0 * log_std_old)
    g_net, _ = backward(policy.mean_net, cache, (mu - mu_old) / var_old / n)
    g_ls = np.exp(2.0 * policy.log_std) / var_old - 1.0
    return np.concatenate([g_net, g_ls])


def fisher_vector_product(policy: GaussianPolicy, obs, v, damping: float = 0.0,
                          cache: list | None = None) -> np.ndarray:
    """Hessian of the mean KL at the current policy times ``v``, plus ``damping * v``.

    At the current parameters the KL Hessian equals the Fisher matrix: for
    the mean head it is ``J^T diag(1/sigma^2) J / n`` (J the network
    Jacobian), and 2 on the diagonal for each log-std entry.
    """
    v = np.asarray(v, dtype=np.float64)
    net = policy.mean_net
    if cache is None:
        _, cache = forward(net, obs)
    n_net = net.n_params
    jv = jvp(net, cache, v[:n_net])
    fv_net, _ = backward(net, cache, jv * np.exp(-2.0 * policy.log_std) / len(cache[0]))
    return np.concatenate([fv_net, 2.0 * v[n_net:]]) + damping * v


def trpo_update(policy: GaussianPolicy, value_net: Network, value_opt: Adam, batch: RolloutBatch,
                config: AgentConfig, rng: np.random.Generator) -> dict:
    """One TRPO iteration: natural-gradient step with backtracking, then value regression."""
    obs, actions = batch.obs, batch.actions
    adv = batch.standardized_advantages()
    old_params = policy.get_params()
    mu_old, cache = forward(policy.mean_net, obs)
    ls_old = policy.log_std.copy()
    logp_old = gaussian_logprob(actions, mu_old, ls_old)
    n = len(adv)

    # gradient of the surrogate mean(ratio * A) at the old parameters (ratio = 1)
    g = logprob_grad(policy, cache, mu_old, actions, adv / n)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite surrogate gradient in TRPO update")
    stats = {"accepted": False, "kl": 0.0, "surrogate_old": float(np.mean(adv)),
             "surrogate_new": float(np.mean(adv)), "improvement": 0.0, "backtracks": -1}

    if np.any(g != 0) and config.trpo_step_frac > 0:
        fvp = lambda v: fisher_vector_product(policy, obs, v, config.cg_damping, cache)  # noqa: E731
        x = conjugate_gradient(fvp, g, config.cg_iters)
        shs = float(x @ fvp(x))
        if shs > 0 and np.isfinite(shs):
            full_step = np.sqrt(2.0 * config.kl_bound / shs) * x * config.trpo_step_frac
            surr_old = float(np.mean(adv))
            for k in range(config.backtrack_iters):
                policy.set_params(old_params + config.backtrack_coef ** k * full_step)
                mu = policy.mean(obs)
                ratio = np.exp(gaussian_logprob(actions, mu, policy.log_std) - logp_old)
                surr = float(np.mean(ratio * adv))
                kl = float(np.mean(diag_gauss_kl(mu, np.exp(policy.log_std), mu_old, np.exp(ls_old))))
                if np.isfinite(surr) and kl <= config.kl_bound and surr - surr_old > 0:
                    stats.update(accepted=True, kl=kl, surrogate_new=surr,
                                 improvement=surr - surr_old, backtracks=k)
                    break
            else:
                policy.set_params(old_params)

    stats["value_loss"] = fit_value(value_net, value_opt, obs, batch.returns, config.value_epochs,
                                    config.minibatch_size, rng)
    return stats
