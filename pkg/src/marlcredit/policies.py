"""Feedforward per-agent actors and centralized critics.

Each agent owns a two-hidden-layer tanh MLP. The rollout fast path runs in
plain numpy; PPO updates rebuild the same math on the autodiff engine so
stored and recomputed log-probs agree to floating-point noise.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _mlp_init(rng: np.random.Generator, sizes: list[int], out_scale: float = 1.0):
    params = {}
    for j in range(len(sizes) - 1):
        w = ad.glorot_uniform(rng, sizes[j], sizes[j + 1])
        if j == len(sizes) - 2:
            w = w * out_scale
        params[f"W{j + 1}"] = Tensor(w, requires_grad=True)
        params[f"b{j + 1}"] = Tensor(np.zeros(sizes[j + 1]), requires_grad=True)
    return params


def _mlp_np(params, x: np.ndarray) -> np.ndarray:
    h = np.tanh(x @ params["W1"].data + params["b1"].data)
    h = np.tanh(h @ params["W2"].data + params["b2"].data)
    return h @ params["W3"].data + params["b3"].data


def _mlp_ad(params, x: Tensor) -> Tensor:
    h = ad.tanh(ad.linear(x, params["W1"], params["b1"]))
    h = ad.tanh(ad.linear(h, params["W2"], params["b2"]))
    return ad.linear(h, params["W3"], params["b3"])


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class DiscretePolicy:
    """Per-agent decentralized actors over a shared discrete action space."""

    def __init__(self, obs_dim: int, n_actions: int, n_agents: int, hidden: int, seed: int):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        sizes = [obs_dim, hidden, hidden, n_actions]
        # small output layer keeps the initial policy near uniform
        self.agents = [_mlp_init(rng, sizes, out_scale=0.01) for _ in range(n_agents)]

    def named_params(self) -> dict[str, Tensor]:
        return {f"agent{i}/{k}": v for i, a in enumerate(self.agents) for k, v in a.items()}

    def log_probs_np(self, i: int, obs: np.ndarray) -> np.ndarray:
        return log_softmax_np(_mlp_np(self.agents[i], obs))

    def logits_ad(self, i: int, obs: Tensor) -> Tensor:
        return _mlp_ad(self.agents[i], obs)

    def act(self, obs_list, rng: np.random.Generator):
        """Sample one joint action; returns (actions, extras) with per-agent
        log-probs and full distributions."""
        actions = np.zeros(self.n_agents, dtype=np.int64)
        log_probs = np.zeros(self.n_agents)
        probs = np.zeros((self.n_agents, self.n_actions))
        for i in range(self.n_agents):
            lp = self.log_probs_np(i, obs_list[i][None, :])[0]
            p = np.exp(lp)
            u = rng.random()
            a = int(min(np.searchsorted(np.cumsum(p), u, side="right"), self.n_actions - 1))
            actions[i] = a
            log_probs[i] = lp[a]
            probs[i] = p
        return actions, {"log_probs": log_probs, "policy_probs": probs}

    def greedy(self, obs_list):
        return np.array(
            [int(self.log_probs_np(i, obs_list[i][None, :])[0].argmax()) for i in range(self.n_agents)],
            dtype=np.int64,
        )

    def episode_log_prob_sum(self, i: int, obs: np.ndarray, actions: np.ndarray) -> Tensor:
        """Sum over the episode of log pi(a_t | o_t) for agent i, on the
        autodiff graph (the score function's building block)."""
        lp = ad.log_softmax(self.logits_ad(i, Tensor(obs)), axis=-1)
        onehot = np.eye(self.n_actions)[actions]
        return ad.tsum(ad.mul(lp, Tensor(onehot)))


class CentralCritic:
    """Per-agent value heads over the centralized state."""

    def __init__(self, central_dim: int, n_agents: int, hidden: int, seed: int):
        self.central_dim = central_dim
        self.n_agents = n_agents
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        sizes = [central_dim, hidden, hidden, 1]
        self.agents = [_mlp_init(rng, sizes) for _ in range(n_agents)]

    def named_params(self) -> dict[str, Tensor]:
        return {f"critic{i}/{k}": v for i, a in enumerate(self.agents) for k, v in a.items()}

    def values_np(self, i: int, central: np.ndarray) -> np.ndarray:
        return _mlp_np(self.agents[i], central)[..., 0]

    def values_ad(self, i: int, central: Tensor) -> Tensor:
        return _mlp_ad(self.agents[i], central)


def central_state_rows(episode_obs: np.ndarray, global_states: np.ndarray) -> np.ndarray:
    """CTDE critic input: all agents' observations concatenated with the
    global state, per timestep."""
    T = episode_obs.shape[0]
    flat_obs = episode_obs.reshape(T, -1)
    return np.concatenate([flat_obs, global_states[:T]], axis=1)
