"""Episode containers and the off-policy trajectory buffer."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Episode:
    """One complete joint trajectory with its terminal team reward.

    global_states holds s_0..s_T (length T+1); the last row is the final
    global state consumed by the reward model's outcome encoder. Collection
    -time policy outputs (log-probs, values, full action distributions) are
    optional and only present on trainer-collected episodes.
    """

    obs: np.ndarray  # (T, N, obs_dim)
    actions: np.ndarray  # (T, N) int64
    active: np.ndarray  # (T, N) bool
    global_states: np.ndarray  # (T+1, state_dim)
    team_reward: float
    log_probs: np.ndarray | None = None  # (T, N)
    values: np.ndarray | None = None  # (T, N)
    policy_probs: np.ndarray | None = None  # (T, N, n_actions)
    debug_events: list | None = None  # dense event log; analysis only, never trained on

    def __post_init__(self):
        T, N = self.actions.shape
        if self.obs.shape[:2] != (T, N) or self.active.shape != (T, N):
            raise ValueError("episode arrays disagree on (T, N)")
        if self.global_states.shape[0] != T + 1:
            raise ValueError("global_states must cover s_0..s_T")
        if not np.isfinite(self.team_reward):
            raise ValueError("terminal reward must be finite")

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def N(self) -> int:
        return self.actions.shape[1]

    @property
    def final_state(self) -> np.ndarray:
        return self.global_states[-1]


@dataclass
class EpisodeBatch:
    """Stacked same-shape episodes for vectorized reward-model passes."""

    obs: np.ndarray  # (B, T, N, obs_dim)
    actions: np.ndarray  # (B, T, N)
    active: np.ndarray  # (B, T, N)
    global_states: np.ndarray  # (B, T+1, state_dim)
    team_rewards: np.ndarray  # (B,)
    policy_probs: np.ndarray | None = None  # (B, T, N, n_actions)

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def stack_episodes(episodes: list[Episode]) -> EpisodeBatch:
    shapes = {(e.T, e.N, e.obs.shape[-1]) for e in episodes}
    if len(shapes) != 1:
        raise ValueError(f"cannot stack episodes with mixed shapes: {shapes}")
    probs = None
    if all(e.policy_probs is not None for e in episodes):
        probs = np.stack([e.policy_probs for e in episodes])
    return EpisodeBatch(
        obs=np.stack([e.obs for e in episodes]),
        actions=np.stack([e.actions for e in episodes]),
        active=np.stack([e.active for e in episodes]),
        global_states=np.stack([e.global_states for e in episodes]),
        team_rewards=np.array([e.team_reward for e in episodes]),
        policy_probs=probs,
    )


@dataclass
class TrajectoryBuffer:
    """Ring buffer of completed episodes with seeded sampling."""

    capacity: int
    episodes: list[Episode] = field(default_factory=list)
    _next_slot: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("buffer capacity must be at least 1")

    def __len__(self) -> int:
        return len(self.episodes)

    def push(self, episode: Episode) -> None:
        if len(self.episodes) < self.capacity:
            self.episodes.append(episode)
        else:
            self.episodes[self._next_slot] = episode
            self._next_slot = (self._next_slot + 1) % self.capacity

    def sample(self, rng: np.random.Generator, batch_size: int) -> list[Episode]:
        """Uniform sample without replacement; falls back to sampling with
        replacement (with a warning) when the buffer is still too small."""
        if not self.episodes:
            raise ValueError("cannot sample from an empty buffer")
        if len(self.episodes) < batch_size:
            warnings.warn(
                f"buffer holds {len(self.episodes)} episodes < batch {batch_size}; "
                "sampling with replacement",
                stacklevel=2,
            )
            idx = rng.integers(0, len(self.episodes), size=batch_size)
        else:
            idx = rng.choice(len(self.episodes), size=batch_size, replace=False)
        return [self.episodes[int(i)] for i in idx]
