"""Deterministic shift-and-normalize reward redistribution.

Converts unnormalized per-agent per-timestep contribution scores into
dense shaped rewards whose total equals the episodic team reward by
construction. All functions here are pure, model-free float64 math;
learning lives elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1e-8
# A shifted-score mass at or below this (relative) threshold is treated as
# degenerate and replaced by the uniform distribution over active entries.
DEGENERACY_REL_TOL = 1e-12
RETURN_EQUIV_TOL = 1e-9


def _as_float_matrix(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D (timesteps x agents), got shape {out.shape}")
    return out


def _check_finite(a: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        t, i = np.argwhere(bad)[0]
        raise ValueError(f"{name} contains a non-finite entry at (t={t}, agent={i})")


@dataclass(frozen=True)
class ScoreMatrix:
    """Unnormalized contribution scores over one episode.

    scores[t, i] is agent i's score at step t; active[t, i] marks whether
    the agent was alive/acting there. Inactive entries never receive credit.
    """

    scores: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        scores = _as_float_matrix(self.scores, "scores")
        active = np.asarray(self.active, dtype=bool)
        if active.shape != scores.shape:
            raise ValueError(f"active mask shape {active.shape} != scores shape {scores.shape}")
        if scores.shape[0] < 1 or scores.shape[1] < 1:
            raise ValueError("need at least one timestep and one agent")
        _check_finite(scores, "scores")
        if not active.any():
            raise ValueError("episode has no active entries")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "active", active)

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    @property
    def N(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class RedistributionWeights:
    """Temporal and per-agent weight factors, plus the epsilon that built them.

    temporal sums to 1; each agent row with at least one active agent sums
    to 1; inactive entries are exactly 0. empty_timesteps flags rows that
    had no active agent (their agent row is all zeros).
    """

    temporal: np.ndarray
    agent: np.ndarray
    epsilon: float
    empty_timesteps: np.ndarray

    def __post_init__(self):
        temporal = np.asarray(self.temporal, dtype=np.float64)
        agent = _as_float_matrix(self.agent, "agent weights")
        empty = np.asarray(self.empty_timesteps, dtype=bool)
        if temporal.ndim != 1 or temporal.shape[0] != agent.shape[0]:
            raise ValueError("temporal weights must be a vector of length T")
        if empty.shape != temporal.shape:
            raise ValueError("empty_timesteps must be a vector of length T")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if (temporal < 0).any() or (temporal > 1).any() or (agent < 0).any() or (agent > 1).any():
            raise ValueError("weights must lie in [0, 1]")
        if abs(temporal.sum() - 1.0) > 1e-12:
            raise ValueError("temporal weights must sum to 1")
        row_sums = agent.sum(axis=1)
        if np.abs(row_sums[~empty] - 1.0).max(initial=0.0) > 1e-12:
            raise ValueError("agent weight rows with active agents must sum to 1")
        if empty.any() and np.abs(row_sums[empty]).max() != 0.0:
            raise ValueError("agent weight rows without active agents must be all zero")
        object.__setattr__(self, "temporal", temporal)
        object.__setattr__(self, "agent", agent)
        object.__setattr__(self, "empty_timesteps", empty)


@dataclass(frozen=True)
class RedistributedRewards:
    """Per-agent per-timestep shaped rewards summing to the team reward."""

    rewards: np.ndarray
    team_reward: float
    weights: RedistributionWeights
    active: np.ndarray

    def __post_init__(self):
        rewards = _as_float_matrix(self.rewards, "rewards")
        active = np.asarray(self.active, dtype=bool)
        r = float(self.team_reward)
        gap = abs(rewards.sum() - r)
        if gap > RETURN_EQUIV_TOL * max(1.0, abs(r)):
            raise ValueError(f"return equivalence violated: |sum - R| = {gap:.3e}")
        if rewards[~active].any():
            raise ValueError("inactive entries must receive exactly zero reward")
        if r != 0.0 and (np.sign(rewards[rewards != 0.0]) != np.sign(r)).any():
            raise ValueError("all nonzero shaped rewards must share the team reward's sign")
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "team_reward", r)


@dataclass(frozen=True)
class PotentialSeries:
    """Per-agent prefix-sum potentials; potentials[0, :] == 0, gamma fixed at 1."""

    potentials: np.ndarray
    gamma: float = 1.0


def aggregate_scores(m: ScoreMatrix) -> np.ndarray:
    """Per-timestep score totals over active agents (inactive contribute 0)."""
    return np.where(m.active, m.scores, 0.0).sum(axis=1)


def _shift_normalize(values: np.ndarray, epsilon: float) -> np.ndarray:
    """Shift by the minimum, divide by the guarded total, rescale to sum 1.

    Degenerate inputs (all values equal, within the relative tolerance)
    fall back to the uniform distribution.
    """
    shifted = values - values.min()
    total = shifted.sum()
    scale = max(1.0, np.abs(values).max())
    if total <= DEGENERACY_REL_TOL * scale:
        return np.full(values.shape, 1.0 / values.size)
    w = shifted / (total + epsilon)
    return w / w.sum()


def temporal_weights(c_agg: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Normalized temporal weights from aggregated scores."""
    c_agg = np.asarray(c_agg, dtype=np.float64)
    if c_agg.ndim != 1 or c_agg.size == 0:
        raise ValueError("aggregated scores must be a non-empty vector")
    _check_finite(c_agg.reshape(-1, 1), "aggregated scores")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return _shift_normalize(c_agg, epsilon)


def agent_weights(m: ScoreMatrix, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-timestep agent weights; each row normalizes over active agents only.

    Rows without any active agent come back as all zeros (flagged in
    compute_weights metadata).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = np.zeros((m.T, m.N))
    for t in range(m.T):
        idx = np.flatnonzero(m.active[t])
        if idx.size == 0:
            continue
        out[t, idx] = _shift_normalize(m.scores[t, idx], epsilon)
    return out


def compute_weights(m: ScoreMatrix, epsilon: float = DEFAULT_EPSILON) -> RedistributionWeights:
    """Bundle temporal and agent weights with empty-timestep metadata."""
    return RedistributionWeights(
        temporal=temporal_weights(aggregate_scores(m), epsilon),
        agent=agent_weights(m, epsilon),
        epsilon=epsilon,
        empty_timesteps=~m.active.any(axis=1),
    )


def _uniform_weights(active: np.ndarray, epsilon: float) -> RedistributionWeights:
    """Product-form weights for an even split over all active cells."""
    counts = active.sum(axis=1).astype(np.float64)
    total = counts.sum()
    agent = np.zeros(active.shape)
    nonempty = counts > 0
    agent[active] = np.repeat(1.0 / counts[nonempty], counts[nonempty].astype(int))
    return RedistributionWeights(
        temporal=counts / total,
        agent=agent,
        epsilon=epsilon,
        empty_timesteps=~nonempty,
    )


def _rewards_from_weights(
    w: RedistributionWeights, active: np.ndarray, team_reward: float, epsilon: float
) -> RedistributedRewards:
    raw = w.temporal[:, None] * w.agent
    if raw.sum() == 0.0 and team_reward != 0.0:
        # All temporal mass landed on empty timesteps; fall back to an even
        # split so the team reward is still conserved.
        w = _uniform_weights(active, epsilon)
        raw = w.temporal[:, None] * w.agent
    rewards = raw * team_reward
    total = rewards.sum()
    if total != 0.0:
        rewards *= team_reward / total
    return RedistributedRewards(rewards=rewards, team_reward=team_reward, weights=w, active=active)


def redistribute(
    m: ScoreMatrix, team_reward: float, epsilon: float = DEFAULT_EPSILON
) -> RedistributedRewards:
    """Shift-and-normalize redistribution of the team reward over (t, i) cells.

    rewards[t, i] = temporal[t] * agent[t, i] * R, globally rescaled so the
    total equals R even when some timesteps have no active agents.
    """
    team_reward = float(team_reward)
    if not np.isfinite(team_reward):
        raise ValueError("team reward must be finite")
    return _rewards_from_weights(compute_weights(m, epsilon), m.active, team_reward, epsilon)


def uniform_redistribution(
    T: int, N: int, active: np.ndarray, team_reward: float, epsilon: float = DEFAULT_EPSILON
) -> RedistributedRewards:
    """Even split of the team reward over all active cells."""
    active = np.asarray(active, dtype=bool)
    if active.shape != (T, N):
        raise ValueError(f"active mask shape {active.shape} != ({T}, {N})")
    if not active.any():
        raise ValueError("cannot redistribute with no active cells")
    team_reward = float(team_reward)
    if not np.isfinite(team_reward):
        raise ValueError("team reward must be finite")
    return _rewards_from_weights(_uniform_weights(active, epsilon), active, team_reward, epsilon)


def temporal_only_redistribution(
    m: ScoreMatrix, team_reward: float, epsilon: float = DEFAULT_EPSILON
) -> RedistributedRewards:
    """Score-driven temporal weights with an even within-timestep agent split."""
    team_reward = float(team_reward)
    if not np.isfinite(team_reward):
        raise ValueError("team reward must be finite")
    temporal = temporal_weights(aggregate_scores(m), epsilon)
    counts = m.active.sum(axis=1).astype(np.float64)
    agent = np.zeros((m.T, m.N))
    nonempty = counts > 0
    agent[m.active] = np.repeat(1.0 / counts[nonempty], counts[nonempty].astype(int))
    w = RedistributionWeights(
        temporal=temporal, agent=agent, epsilon=epsilon, empty_timesteps=~nonempty
    )
    return _rewards_from_weights(w, m.active, team_reward, epsilon)


def delta_k(w: RedistributionWeights) -> np.ndarray:
    """Per-agent gradient scaling factors: delta[k] = sum_t temporal[t] * agent[t, k].

    Each entry lies in [0, 1]; the entries sum to 1 whenever every timestep
    has at least one active agent. Rounding can push the dot product an ulp
    past 1, so values inside a tiny guard band are clipped back.
    """
    d = w.agent.T @ w.temporal
    if (d < -1e-9).any() or (d > 1.0 + 1e-9).any():
        raise AssertionError(f"delta outside [0, 1] beyond rounding noise: {d}")
    return np.clip(d, 0.0, 1.0)


def potential_series(r: RedistributedRewards) -> PotentialSeries:
    """Per-agent potentials as prefix sums of shaped rewards (gamma = 1)."""
    T, N = r.rewards.shape
    potentials = np.zeros((T + 1, N))
    np.cumsum(r.rewards, axis=0, out=potentials[1:])
    return PotentialSeries(potentials=potentials, gamma=1.0)


def verify_telescoping(p: PotentialSeries, r: RedistributedRewards) -> tuple[bool, float]:
    """Check that consecutive potential differences reproduce the shaped rewards.

    Returns (ok, max absolute residual); ok means the residual is at most
    1e-12. Residual 0 is guaranteed when the rewards' prefix sums are
    exactly representable (e.g. dyadic-valued rewards).
    """
    if p.potentials.shape != (r.rewards.shape[0] + 1, r.rewards.shape[1]):
        raise ValueError(
            f"potentials shape {p.potentials.shape} does not match rewards shape {r.rewards.shape}"
        )
    residual = np.abs((p.potentials[1:] - p.potentials[:-1]) - r.rewards)
    worst = float(residual.max())
    return worst <= 1e-12, worst
