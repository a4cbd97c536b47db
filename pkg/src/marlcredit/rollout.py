"""Episode collection helpers shared by the trainer, analysis, and tests."""
from __future__ import annotations

import numpy as np

from .envs import EnvBase
from .episodes import Episode


def play_episode(env: EnvBase, seed: int, action_fn, record_policy: bool = False) -> Episode:
    """Roll one full-horizon episode.

    action_fn(obs_list, t) must return (actions, extras) where extras may
    carry 'log_probs', 'values' and 'policy_probs' rows for the step.
    """
    obs_list, mask = env.reset(seed)
    T, N = env.horizon, env.n_agents
    obs = np.zeros((T, N, env.obs_dim))
    actions = np.zeros((T, N), dtype=np.int64)
    active = np.zeros((T, N), dtype=bool)
    states = np.zeros((T + 1, env.state_dim))
    log_probs = np.zeros((T, N))
    values = np.zeros((T, N))
    probs = np.zeros((T, N, env.n_actions)) if record_policy else None

    reward = 0.0
    have_stats = False
    for t in range(T):
        obs[t] = np.stack(obs_list)
        active[t] = mask
        states[t] = env.global_state()
        acts, extras = action_fn(obs_list, t)
        actions[t] = acts
        if "log_probs" in extras:
            log_probs[t] = extras["log_probs"]
            values[t] = extras.get("values", 0.0)
            have_stats = True
        if probs is not None:
            probs[t] = extras["policy_probs"]
        obs_list, done, reward = env.step(acts)
    assert done
    states[T] = env.global_state()
    return Episode(
        obs=obs,
        actions=actions,
        active=active,
        global_states=states,
        team_reward=float(reward),
        log_probs=log_probs if have_stats else None,
        values=values if have_stats else None,
        policy_probs=probs,
        debug_events=list(getattr(env, "events", [])),
    )


def random_episode(env: EnvBase, seed: int) -> Episode:
    """Episode under the uniform-random joint policy."""
    rng = np.random.default_rng(seed)

    def act(obs_list, t):
        return rng.integers(0, env.n_actions, size=env.n_agents), {}

    return play_episode(env, seed, act)
