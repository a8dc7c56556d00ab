"""Small numpy multilayer perceptrons with hand-written gradients.

Parameters of a :class:`Network` live in one flat float64 vector so that
optimizers, Polyak averaging and trust-region steps work on plain arrays.
Hidden layers use tanh, the output layer is linear.

Besides reverse mode (:func:`backward`) there is a forward-mode
Jacobian-vector product (:func:`jvp`), which the trust-region update needs
for Fisher-vector products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
SNAPSHOT_FORMAT = "adprogress-policy-v1"


class NetworkError(ValueError):
    pass


def _layer_slices(layer_sizes: Sequence[int]) -> list[tuple[slice, tuple[int, int], slice]]:
    out = []
    offset = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + n_in * n_out)
        offset += n_in * n_out
        b = slice(offset, offset + n_out)
        offset += n_out
        out.append((w, (n_in, n_out), b))
    return out


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum((n_in + 1) * n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass
class Network:
    layer_sizes: tuple[int, ...]
    theta: np.ndarray
    _slices: list = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise NetworkError("a network needs at least an input and an output layer")
        if any(n < 1 for n in self.layer_sizes):
            raise NetworkError(f"layer widths must be >= 1, got {self.layer_sizes}")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.layer_sizes),):
            raise NetworkError(
                f"expected {param_count(self.layer_sizes)} parameters, got {self.theta.shape}")
        self._slices = _layer_slices(self.layer_sizes)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layers(self, theta: np.ndarray | None = None):
        """Yield ``(W, b)`` views into ``theta`` (defaults to the network's own)."""
        theta = self.theta if theta is None else theta
        for w, shape, b in self._slices:
            yield theta[w].reshape(shape), theta[b]

    def copy(self) -> "Network":
        return Network(self.layer_sizes, self.theta.copy())

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


def mlp_init(layer_sizes: Sequence[int], seed: int | np.random.Generator = 0,
             out_scale: float = 1.0) -> Network:
    """Weights ~ U(-1/sqrt(n_in), 1/sqrt(n_in)), biases zero.

    ``out_scale`` shrinks the last layer's weights (policy heads start near zero).
    """
    layer_sizes = tuple(layer_sizes)
    if len(layer_sizes) < 2:
        raise NetworkError("a network needs at least an input and an output layer")
    if any(int(n) < 1 for n in layer_sizes):
        raise NetworkError(f"layer widths must be >= 1, got {layer_sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = np.zeros(param_count(layer_sizes))
    slices = _layer_slices(layer_sizes)
    for i, (w, (n_in, n_out), _) in enumerate(slices):
        bound = 1.0 / np.sqrt(n_in)
        if i == len(slices) - 1:
            bound *= out_scale
        theta[w] = rng.uniform(-bound, bound, n_in * n_out)
    return Network(layer_sizes, theta)


def forward(net: Network, x, theta: np.ndarray | None = None) -> tuple[np.ndarray, list]:
    """Evaluate the network; returns ``(y, cache)`` for :func:`backward`/:func:`jvp`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.layer_sizes[0]:
        raise NetworkError(f"input width {x.shape[-1]} != {net.layer_sizes[0]}")
    acts = [x]
    h = x
    n_layers = len(net.layer_sizes) - 1
    for i, (W, b) in enumerate(net.layers(theta)):
        z = h @ W + b
        h = np.tanh(z) if i < n_layers - 1 else z
        acts.append(h)
    return h, acts


def backward(net: Network, cache: list, dy, theta: np.ndarray | None = None
             ) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradient of ``sum(y * dy)``.

    Returns ``(grad_theta, grad_x)``; batched inputs sum their parameter
    gradients over the batch.
    """
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache[-1].shape:
        raise NetworkError(f"dy shape {dy.shape} does not match output {cache[-1].shape}")
    grad = np.zeros(net.n_params)
    layers = list(net.layers(theta))
    g = dy
    last = len(layers) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (1.0 - cache[i + 1] ** 2)
        a_in = cache[i]
        w, shape, b = net._slices[i]
        if a_in.ndim == 1:
            grad[w] = np.outer(a_in, g).ravel()
            grad[b] = g
        else:
            grad[w] = (a_in.reshape(-1, shape[0]).T @ g.reshape(-1, shape[1])).ravel()
            grad[b] = g.reshape(-1, shape[1]).sum(axis=0)
        g = g @ layers[i][0].T
    return grad, g


def jvp(net: Network, cache: list, dtheta, dx=None, theta: np.ndarray | None = None) -> np.ndarray:
    """Forward-mode directional derivative of the output along ``(dtheta, dx)``."""
    dtheta = np.asarray(dtheta, dtype=np.float64)
    t = np.zeros_like(cache[0]) if dx is None else np.asarray(dx, dtype=np.float64)
    last = len(net.layer_sizes) - 2
    for i, ((W, _), (dW, db)) in enumerate(zip(net.layers(theta), net.layers(dtheta))):
        dz = t @ W + cache[i] @ dW + db
        t = dz * (1.0 - cache[i + 1] ** 2) if i < last else dz
    return t


def finite_diff_check(net: Network, x, eps: float = 1e-5, dy=None,
                      rng: np.random.Generator | None = None) -> float:
    """Worst relative error between :func:`backward` and central differences.

    Checks the scalar ``sum(y * dy)`` (``dy`` random if not given) against
    every parameter and input coordinate. The relative error of each entry is
    ``|a - b| / max(|a| + |b|, 1e-8)``.
    """
    if not eps > 0:
        raise NetworkError("eps must be > 0")
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    y, cache = forward(net, x)
    dy = rng.standard_normal(y.shape) if dy is None else np.asarray(dy, dtype=np.float64)
    g_theta, g_x = backward(net, cache, dy)

    def f(theta, xx):
        return float(np.sum(forward(net, xx, theta)[0] * dy))

    fd_theta = np.empty(net.n_params)
    for i in range(net.n_params):
        tp = net.theta.copy()
        tm = net.theta.copy()
        tp[i] += eps
        tm[i] -= eps
        fd_theta[i] = (f(tp, x) - f(tm, x)) / (2 * eps)
    fd_x = np.empty(x.size)
    flat = x.ravel()
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fd_x[i] = (f(net.theta, xp.reshape(x.shape)) - f(net.theta, xm.reshape(x.shape))) / (2 * eps)
    a = np.concatenate([g_theta, g_x.ravel()])
    b = np.concatenate([fd_theta, fd_x])
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params, grads, state: AdamState, lr: float,
              name: str = "params") -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam descent step; returns new ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise NetworkError(f"{name}: shape mismatch {params.shape} / {grads.shape} / {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise NetworkError(f"{name}: non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads ** 2
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, n: int, lr: float, name: str = "params"):
        self.state = AdamState.zeros(n)
        self.lr = lr
        self.name = name

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        new, self.state = adam_step(params, grads, self.state, self.lr, self.name)
        return new


# ---------------------------------------------------------------------------
# Gaussian policies
# ---------------------------------------------------------------------------


def gaussian_logprob(a, mu, log_std) -> np.ndarray:
    z = (np.asarray(a) - mu) / np.exp(log_std)
    return np.sum(-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI, axis=-1)


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian with a network mean and a state-independent log-std."""

    mean_net: Network
    log_std: np.ndarray

    def __post_init__(self) -> None:
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.log_std.shape != (self.mean_net.layer_sizes[-1],):
            raise NetworkError("log_std must have one entry per action dimension")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], seed, init_std: float = 1.0,
               out_scale: float = 0.01) -> "GaussianPolicy":
        net = mlp_init(layer_sizes, seed, out_scale=out_scale)
        return cls(net, np.full(layer_sizes[-1], np.log(init_std)))

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.log_std.size

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.mean_net.theta, self.log_std])

    def set_params(self, flat: np.ndarray) -> None:
        n = self.mean_net.n_params
        self.mean_net.theta = np.array(flat[:n], dtype=np.float64)
        self.log_std = np.array(flat[n:], dtype=np.float64)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy())

    def mean(self, obs) -> np.ndarray:
        return forward(self.mean_net, obs)[0]


def gaussian_sample(policy: GaussianPolicy, obs, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    mu = policy.mean(obs)
    a = mu + np.exp(policy.log_std) * rng.standard_normal(mu.shape)
    return a, gaussian_logprob(a, mu, policy.log_std)


def diag_gauss_kl(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)) summed over the last axis."""
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise NetworkError("standard deviations must be > 0")
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    terms = np.log(sigma2 / sigma1) + (sigma1 ** 2 + (mu1 - mu2) ** 2) / (2 * sigma2 ** 2) - 0.5
    return np.sum(terms, axis=-1)


def log1m_tanh2(u) -> np.ndarray:
    """Stable ``log(1 - tanh(u)^2)``."""
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash(mean, log_std, xi, action_limit: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reparameterized tanh-Gaussian: returns ``(action, logprob, pre_tanh)``."""
    u = mean + np.exp(log_std) * xi
    a = action_limit * np.tanh(u)
    logp = gaussian_logprob(u, mean, log_std) - np.sum(np.log(action_limit) + log1m_tanh2(u), axis=-1)
    return a, logp, u


def squashed_gaussian_sample(mean, log_std, rng: np.random.Generator,
                             action_limit: float) -> tuple[np.ndarray, np.ndarray]:
    mean = np.asarray(mean, dtype=np.float64)
    a, logp, _ = squash(mean, log_std, rng.standard_normal(mean.shape), action_limit)
    return a, logp


def squashed_gaussian_logprob(a, mean, log_std, action_limit: float) -> np.ndarray:
    """Density of ``action_limit * tanh(N(mean, exp(log_std)^2))`` at ``a``."""
    u = np.arctanh(np.asarray(a, dtype=np.float64) / action_limit)
    return gaussian_logprob(u, mean, log_std) - np.sum(np.log(action_limit) + log1m_tanh2(u), axis=-1)


# ---------------------------------------------------------------------------
# Policy snapshots
# ---------------------------------------------------------------------------


@dataclass
class PolicySnapshot:
    """Everything needed to replay a trained policy deterministically.

    ``head`` selects how the network output becomes an action:

    * ``"gaussian"``: output is the action mean (TRPO, PPO), ``log_std`` set;
    * ``"tanh"``: ``action_limit * tanh(output)`` (DDPG);
    * ``"squashed"``: output is ``[mean, log_std]``; the deterministic action
      is ``action_limit * tanh(mean)`` (SAC).
    """

    kind: str
    head: str
    net: Network
    scaler_low: np.ndarray
    scaler_high: np.ndarray
    action_limit: float
    log_std: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def action_dim(self) -> int:
        out = self.net.layer_sizes[-1]
        return out // 2 if self.head == "squashed" else out

    def scale(self, features) -> np.ndarray:
        """Min-max scaling with the training scaler's bounds (no clamping)."""
        return (np.asarray(features, dtype=np.float64) - self.scaler_low) / (self.scaler_high - self.scaler_low)

    def act(self, obs) -> np.ndarray:
        """Deterministic action for scaled observations (batch or single)."""
        y = forward(self.net, obs)[0]
        if self.head == "gaussian":
            return y
        if self.head == "tanh":
            return self.action_limit * np.tanh(y)
        if self.head == "squashed":
            return self.action_limit * np.tanh(y[..., : self.action_dim])
        raise NetworkError(f"unknown policy head {self.head!r}")


def save_snapshot(snapshot: PolicySnapshot, path: str | Path) -> Path:
    """Write a snapshot as an uncompressed ``.npz`` with a JSON header entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": SNAPSHOT_FORMAT,
        "kind": snapshot.kind,
        "head": snapshot.head,
        "layer_sizes": list(snapshot.net.layer_sizes),
        "action_limit": snapshot.action_limit,
        "meta": snapshot.meta,
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "theta": snapshot.net.theta,
        "scaler_low": snapshot.scaler_low,
        "scaler_high": snapshot.scaler_high,
    }
    if snapshot.log_std is not None:
        arrays["log_std"] = snapshot.log_std
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_snapshot(path: str | Path) -> PolicySnapshot:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("format") != SNAPSHOT_FORMAT:
            raise NetworkError(f"{path}: unsupported snapshot format {header.get('format')!r}")
        return PolicySnapshot(
            kind=header["kind"],
            head=header["head"],
            net=Network(tuple(header["layer_sizes"]), data["theta"].copy()),
            scaler_low=data["scaler_low"].copy(),
            scaler_high=data["scaler_high"].copy(),
            action_limit=float(header["action_limit"]),
            log_std=data["log_std"].copy() if "log_std" in data.files else None,
            meta=header["meta"],
        )
