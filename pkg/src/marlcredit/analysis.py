"""Executable checks of the method's theory: gradient-direction
preservation, variance decompositions, ablation reward paths, and the
weight-product interpretability export.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .envs import EnvBase
from .episodes import Episode
from .policies import DiscretePolicy
from .redistribution import (
    DEFAULT_EPSILON,
    RETURN_EQUIV_TOL,
    RedistributedRewards,
    RedistributionWeights,
    ScoreMatrix,
    delta_k,
    redistribute,
    temporal_only_redistribution,
    uniform_redistribution,
)
from .reward_model import RewardModel
from .rollout import play_episode


class RedistributionMode(str, Enum):
    TAR2 = "tar2"
    UNIFORM = "uniform"
    TEMPORAL_ONLY = "temporal_only"
    NO_NORMALIZATION = "no_normalization"
    NO_OUTCOME = "no_outcome"
    NO_INVERSE_DYNAMICS = "no_inverse_dynamics"


# Ablation arms whose reward path runs through the learned score network.
MODEL_BACKED_MODES = {
    RedistributionMode.TAR2,
    RedistributionMode.TEMPORAL_ONLY,
    RedistributionMode.NO_NORMALIZATION,
    RedistributionMode.NO_OUTCOME,
    RedistributionMode.NO_INVERSE_DYNAMICS,
}


@dataclass
class ShapedOutcome:
    """Per-episode shaped rewards plus provenance for trainer metrics."""

    rewards: np.ndarray
    weights: RedistributionWeights | None
    equivalent: bool


def no_normalization_rewards(model: RewardModel, episode: Episode) -> np.ndarray:
    """Ablation arm: raw scores emitted directly as rewards.

    Deliberately skips shift, normalize, and rescale, so the total will not
    match the team reward in general.
    """
    return model.score(episode).scores.copy()


def make_redistributor(
    mode: RedistributionMode, model: RewardModel | None, epsilon: float = DEFAULT_EPSILON
):
    """Episode -> ShapedOutcome callable for the requested mode.

    The no_outcome / no_inverse_dynamics arms follow the standard path;
    their difference lives in the model configuration.
    """
    mode = RedistributionMode(mode)
    if mode in MODEL_BACKED_MODES and model is None:
        raise ValueError(f"mode '{mode.value}' needs a reward model")

    def shaped(episode: Episode) -> ShapedOutcome:
        if mode == RedistributionMode.UNIFORM:
            r = uniform_redistribution(
                episode.T, episode.N, episode.active, episode.team_reward, epsilon
            )
            return ShapedOutcome(r.rewards, r.weights, True)
        if mode == RedistributionMode.NO_NORMALIZATION:
            rewards = no_normalization_rewards(model, episode)
            gap = abs(rewards.sum() - episode.team_reward)
            return ShapedOutcome(
                rewards, None, gap <= RETURN_EQUIV_TOL * max(1.0, abs(episode.team_reward))
            )
        scores = model.score(episode)
        if mode == RedistributionMode.TEMPORAL_ONLY:
            r = temporal_only_redistribution(scores, episode.team_reward, epsilon)
        else:
            r = redistribute(scores, episode.team_reward, epsilon)
        return ShapedOutcome(r.rewards, r.weights, True)

    return shaped


# ---------------------------------------------------------------------------
# gradient-direction preservation


@dataclass
class GradientReport:
    """Per-agent score-function estimates and their proportionality check."""

    g_global: list[np.ndarray]
    g_shaped: list[np.ndarray]
    delta: np.ndarray
    residuals: np.ndarray
    tolerances: np.ndarray

    @property
    def passed(self) -> bool:
        return bool((self.residuals <= self.tolerances).all())


def _score_function(policy: DiscretePolicy, episode: Episode, agent: int) -> np.ndarray:
    """G_k = sum_t grad log pi(a_t | o_t) for one agent, flattened."""
    params = policy.agents[agent]
    for p in params.values():
        p.zero_grad()
    loss = policy.episode_log_prob_sum(agent, episode.obs[:, agent, :], episode.actions[:, agent])
    ad.backward(loss)
    return np.concatenate(
        [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            for p in params.values()
        ]
    )


def reinforce_estimates(
    policy: DiscretePolicy, episode: Episode, shaped: RedistributedRewards
) -> GradientReport:
    """Plain score-function estimates under the team reward and under the
    shaped per-agent returns, with the proportionality residual."""
    if episode.N != policy.n_agents or episode.obs.shape[-1] != policy.obs_dim:
        raise ValueError("episode does not match the policy's dimensions")
    team_reward = episode.team_reward
    delta = delta_k(shaped.weights)
    agent_returns = shaped.rewards.sum(axis=0)

    g_global, g_shaped, residuals, tolerances = [], [], [], []
    for k in range(policy.n_agents):
        G = _score_function(policy, episode, k)
        g_g = G * team_reward
        g_s = G * agent_returns[k]
        g_global.append(g_g)
        g_shaped.append(g_s)
        residuals.append(float(np.abs(g_s - delta[k] * g_g).max(initial=0.0)))
        tolerances.append(1e-6 * (1.0 + float(np.abs(g_g).max(initial=0.0))))
    return GradientReport(
        g_global=g_global,
        g_shaped=g_shaped,
        delta=delta,
        residuals=np.array(residuals),
        tolerances=np.array(tolerances),
    )


# ---------------------------------------------------------------------------
# variance decomposition of the joint estimator


@dataclass
class VarianceReport:
    var_shaped: float
    var_orig: float
    var_pbrs: float
    covariance: float
    identity_gap: float
    n_samples: int
    ci_shaped: tuple[float, float]
    ci_orig: tuple[float, float]
    ci_pbrs: tuple[float, float]
    shaped_below_pbrs: bool


def _coordinate_variance(x: np.ndarray) -> float:
    """Sum over coordinates of the per-coordinate population variance."""
    return float((x * x).mean(axis=0).sum() - (x.mean(axis=0) ** 2).sum())


def variance_study(
    policy: DiscretePolicy,
    env: EnvBase,
    redistributor,
    num_samples: int,
    seed: int = 0,
    bootstrap: int = 100,
) -> VarianceReport:
    """Monte-Carlo comparison of the joint policy-gradient estimators.

    Per trajectory: the original estimator pays every agent the terminal
    team reward; the shaped estimator pays each agent its redistributed
    return; their sum is the full potential-shaped estimator.
    """
    dims = [sum(p.size for p in policy.agents[k].values()) for k in range(policy.n_agents)]
    total_dim = sum(dims)
    g_orig = np.zeros((num_samples, total_dim))
    g_shaped = np.zeros((num_samples, total_dim))

    action_rng = np.random.default_rng(seed)
    for s in range(num_samples):
        episode = play_episode(
            env, seed * 1_000_003 + s, lambda obs, t: policy.act(obs, action_rng)
        )
        outcome = redistributor(episode)
        agent_returns = outcome.rewards.sum(axis=0)
        offset = 0
        for k in range(policy.n_agents):
            G = _score_function(policy, episode, k)
            g_orig[s, offset : offset + dims[k]] = G * episode.team_reward
            g_shaped[s, offset : offset + dims[k]] = G * agent_returns[k]
            offset += dims[k]

    g_pbrs = g_orig + g_shaped
    var_orig = _coordinate_variance(g_orig)
    var_shaped = _coordinate_variance(g_shaped)
    var_pbrs = _coordinate_variance(g_pbrs)
    cov = float(
        (g_orig * g_shaped).mean(axis=0).sum()
        - (g_orig.mean(axis=0) * g_shaped.mean(axis=0)).sum()
    )
    identity_gap = abs(var_pbrs - (var_orig + var_shaped + 2.0 * cov))

    boot_rng = np.random.default_rng(seed + 17)
    boots = np.zeros((bootstrap, 3))
    for b in range(bootstrap):
        idx = boot_rng.integers(0, num_samples, size=num_samples)
        boots[b] = (
            _coordinate_variance(g_shaped[idx]),
            _coordinate_variance(g_orig[idx]),
            _coordinate_variance(g_pbrs[idx]),
        )
    lo, hi = np.percentile(boots, [2.5, 97.5], axis=0)

    return VarianceReport(
        var_shaped=var_shaped,
        var_orig=var_orig,
        var_pbrs=var_pbrs,
        covariance=cov,
        identity_gap=identity_gap,
        n_samples=num_samples,
        ci_shaped=(float(lo[0]), float(hi[0])),
        ci_orig=(float(lo[1]), float(hi[1])),
        ci_pbrs=(float(lo[2]), float(hi[2])),
        shaped_below_pbrs=var_shaped < var_pbrs,
    )


# ---------------------------------------------------------------------------
# final-outcome conditioning study


@dataclass
class SyntheticScoreGenerator:
    """Draws (traj id, outcome id, score) with score = g(tau) + h(z) + noise.

    The outcome distribution may depend on the trajectory; the noise term
    is independent of both.
    """

    g_values: np.ndarray
    h_values: np.ndarray
    noise_sd: float
    p_z_given_tau: np.ndarray  # (n_tau, n_z), rows sum to 1

    def draw(self, rng: np.random.Generator, n: int):
        n_tau = len(self.g_values)
        tau = rng.integers(0, n_tau, size=n)
        z = np.array([rng.choice(len(self.h_values), p=self.p_z_given_tau[t]) for t in tau])
        c = self.g_values[tau] + self.h_values[z] + self.noise_sd * rng.normal(size=n)
        return tau, z, c


@dataclass
class ConditioningReport:
    var_given_traj: float
    var_conditional_mean: float
    remaining_var: float
    diff_ci: tuple[float, float]  # bootstrap CI of var_given_traj - var_conditional_mean
    n_samples: int

    @property
    def reduction_outside_ci(self) -> bool:
        return self.diff_ci[0] > 0.0


def _pooled_conditioning_moments(tau, z, c, n_tau: int, n_z: int):
    """Within-trajectory variance of c, variance of the empirical
    conditional means over outcomes, and mean residual variance; pooled
    over trajectories weighted by draw counts. The three satisfy the law of
    total variance exactly as sample moments."""
    total_w = 0.0
    var_c = 0.0
    var_mean = 0.0
    var_resid = 0.0
    for t in range(n_tau):
        sel = tau == t
        n_t = int(sel.sum())
        if n_t == 0:
            continue
        ct = c[sel]
        zt = z[sel]
        v_all = float(ct.var())
        v_between = 0.0
        v_within = 0.0
        for zz in range(n_z):
            grp = ct[zt == zz]
            if grp.size == 0:
                continue
            w = grp.size / n_t
            v_between += w * (float(grp.mean()) - float(ct.mean())) ** 2
            v_within += w * float(grp.var())
        var_c += n_t * v_all
        var_mean += n_t * v_between
        var_resid += n_t * v_within
        total_w += n_t
    return var_c / total_w, var_mean / total_w, var_resid / total_w


def conditioning_variance_study(
    generator: SyntheticScoreGenerator,
    num_samples: int,
    seed: int = 0,
    bootstrap: int = 200,
) -> ConditioningReport:
    """Estimate Var(c | traj) against Var(E[c | traj, outcome])."""
    rng = np.random.default_rng(seed)
    tau, z, c = generator.draw(rng, num_samples)
    n_tau, n_z = len(generator.g_values), len(generator.h_values)
    var_c, var_mean, var_resid = _pooled_conditioning_moments(tau, z, c, n_tau, n_z)

    boot_rng = np.random.default_rng(seed + 23)
    diffs = np.zeros(bootstrap)
    for b in range(bootstrap):
        idx = boot_rng.integers(0, num_samples, size=num_samples)
        v_c, v_m, _ = _pooled_conditioning_moments(tau[idx], z[idx], c[idx], n_tau, n_z)
        diffs[b] = v_c - v_m
    lo, hi = np.percentile(diffs, [2.5, 97.5])

    return ConditioningReport(
        var_given_traj=var_c,
        var_conditional_mean=var_mean,
        remaining_var=var_resid,
        diff_ci=(float(lo), float(hi)),
        n_samples=num_samples,
    )


# ---------------------------------------------------------------------------
# interpretability export


def export_weight_heatmap(weights: RedistributionWeights, path) -> None:
    """CSV of the per-cell product weights; row sums reproduce the temporal
    weights on timesteps that have active agents."""
    products = weights.temporal[:, None] * weights.agent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"agent_{i}" for i in range(products.shape[1])])
        for t, row in enumerate(products):
            writer.writerow([t] + [repr(float(v)) for v in row])
