"""On-policy CTDE trainer: parallel-style rollouts, shaped rewards from the
redistribution path, PopArt return normalization, GAE advantages, and
PPO-clipped updates, with periodic off-policy reward-model training.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .analysis import MODEL_BACKED_MODES, RedistributionMode, make_redistributor
from .autodiff import Tensor
from .envs import EnvBase, make_env
from .episodes import Episode, TrajectoryBuffer
from .optim import Adam
from .policies import CentralCritic, DiscretePolicy, central_state_rows
from .redistribution import RETURN_EQUIV_TOL, delta_k
from .reward_model import RewardModel, RewardModelConfig
from .rollout import play_episode

logger = logging.getLogger(__name__)

METRIC_KEYS = (
    "iteration",
    "episodes",
    "mean_return",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
    "rm_regression_loss",
    "rm_id_loss",
    "delta_mean",
    "delta_min",
    "delta_max",
    "weight_entropy_temporal",
    "weight_entropy_agent",
    "equivalence_violations",
    "rm_age_episodes",
)


class TrainerError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainerConfig:
    """MAPPO-style knobs; defaults follow the common-hyperparameter table."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo_epochs: int = 15
    ppo_batch_size: int = 30  # episodes per mini-batch
    policy_lr: float = 5e-4
    policy_weight_decay: float = 0.0
    policy_hidden: int = 64
    v_value_lr: float = 5e-4
    v_weight_decay: float = 0.0
    v_hidden: int = 64
    grad_clip_actor: float = 0.5
    grad_clip_critic_v: float = 0.5
    policy_clip: float = 0.2
    value_clip: float = 0.2
    entropy_pen: float = 1e-2
    rollout_threads: int = 10
    popart_decay: float = 0.999
    popart_per_agent: bool = False
    normalize_advantages: bool = True
    advantage_norm_per_agent: bool = True
    buffer_capacity: int = 2048


class PopArt:
    """Running return statistics with debiased moments.

    normalize/denormalize form an exact inverse pair; the variance floor
    keeps the scale strictly positive even for constant return streams.
    """

    VAR_FLOOR = 1e-8

    def __init__(self, decay: float = 0.999, n_agents: int | None = None):
        self.decay = decay
        shape = () if n_agents is None else (n_agents,)
        self.mean_raw = np.zeros(shape)
        self.sq_raw = np.zeros(shape)
        self.debias = np.zeros(shape)

    def update(self, returns: np.ndarray) -> None:
        """returns: (T, N) or flat; per-agent stats average over axis 0."""
        if self.mean_raw.shape == ():
            batch_mean = returns.mean()
            batch_sq = (returns * returns).mean()
        else:
            flat = returns.reshape(-1, self.mean_raw.shape[0])
            batch_mean = flat.mean(axis=0)
            batch_sq = (flat * flat).mean(axis=0)
        d = self.decay
        self.mean_raw = d * self.mean_raw + (1 - d) * batch_mean
        self.sq_raw = d * self.sq_raw + (1 - d) * batch_sq
        self.debias = d * self.debias + (1 - d)

    @property
    def mean(self) -> np.ndarray:
        if np.all(self.debias == 0):
            return np.zeros_like(self.mean_raw)
        return self.mean_raw / self.debias

    @property
    def std(self) -> np.ndarray:
        if np.all(self.debias == 0):
            return np.ones_like(self.sq_raw)
        var = self.sq_raw / self.debias - self.mean**2
        return np.sqrt(np.maximum(var, self.VAR_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}/mean_raw": np.atleast_1d(self.mean_raw).astype(float),
            f"{prefix}/sq_raw": np.atleast_1d(self.sq_raw).astype(float),
            f"{prefix}/debias": np.atleast_1d(self.debias).astype(float),
        }

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray]) -> None:
        shape = self.mean_raw.shape
        self.mean_raw = tensors[f"{prefix}/mean_raw"].reshape(shape).copy()
        self.sq_raw = tensors[f"{prefix}/sq_raw"].reshape(shape).copy()
        self.debias = tensors[f"{prefix}/debias"].reshape(shape).copy()


def compute_returns_and_gae(
    rewards: np.ndarray, values: np.ndarray, gamma: float, gae_lambda: float
) -> tuple[np.ndarray, np.ndarray]:
    """Discounted reward-to-go and GAE advantages per agent.

    rewards/values: (T, N); the terminal bootstrap value is 0.
    """
    if rewards.shape != values.shape:
        raise ValueError(f"rewards shape {rewards.shape} != values shape {values.shape}")
    T, N = rewards.shape
    returns = np.zeros((T, N))
    advantages = np.zeros((T, N))
    running_return = np.zeros(N)
    running_adv = np.zeros(N)
    next_value = np.zeros(N)
    for t in range(T - 1, -1, -1):
        running_return = rewards[t] + gamma * running_return
        returns[t] = running_return
        delta = rewards[t] + gamma * next_value - values[t]
        running_adv = delta + gamma * gae_lambda * running_adv
        advantages[t] = running_adv
        next_value = values[t]
    return returns, advantages


def collect_rollouts(
    policy: DiscretePolicy,
    critic: CentralCritic,
    env_pool: list[EnvBase],
    seed_for_slot,
    action_rng: np.random.Generator,
) -> list[Episode]:
    """One full episode per pool slot under the frozen policy snapshot.

    Values recorded are the critic's raw (normalized-domain) outputs. A
    faulting environment aborts only its own episode, which is logged and
    excluded from the batch.
    """
    episodes = []
    for slot, env in enumerate(env_pool):

        def act(obs_list, t):
            actions, extras = policy.act(obs_list, action_rng)
            central = np.concatenate([np.concatenate(obs_list), env.global_state()])[None, :]
            extras["values"] = np.array(
                [critic.values_np(i, central)[0] for i in range(policy.n_agents)]
            )
            return actions, extras

        try:
            episodes.append(play_episode(env, seed_for_slot(slot), act, record_policy=True))
        except Exception:
            logger.exception("rollout slot %d failed; episode excluded", slot)
    return episodes


def _entropy(weights: np.ndarray) -> float:
    w = weights[weights > 0]
    return float(-(w * np.log(w)).sum())


def ppo_update(
    policy: DiscretePolicy,
    critic: CentralCritic,
    policy_opt: Adam,
    critic_opt: Adam,
    episodes: list[Episode],
    advantages: np.ndarray,
    value_targets: np.ndarray,
    config: TrainerConfig,
    shuffle_rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate policy update and value-clipped critic regression.

    advantages/value_targets: (E, T, N) aligned with the episode list;
    stored log-probs and values come from collection time.
    """
    E = len(episodes)
    obs = np.stack([e.obs for e in episodes])  # (E, T, N, Do)
    actions = np.stack([e.actions for e in episodes])
    old_lp = np.stack([e.log_probs for e in episodes])
    old_v = np.stack([e.values for e in episodes])
    central = np.stack(
        [central_state_rows(e.obs, e.global_states) for e in episodes]
    )  # (E, T, Dc)

    if config.normalize_advantages:
        if config.advantage_norm_per_agent:
            # per-agent standardization keeps one agent's concentrated credit
            # from drowning out the other's weaker stream
            mean = advantages.mean(axis=(0, 1), keepdims=True)
            std = advantages.std(axis=(0, 1), keepdims=True)
            advantages = (advantages - mean) / (std + 1e-8)
        else:
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    policy_losses, value_losses, entropies = [], [], []
    for _ in range(config.ppo_epochs):
        order = shuffle_rng.permutation(E)
        for start in range(0, E, config.ppo_batch_size):
            chunk = order[start : start + config.ppo_batch_size]

            policy_opt.zero_grad()
            critic_opt.zero_grad()
            actor_terms, critic_terms, entropy_terms = [], [], []
            for i in range(policy.n_agents):
                o = obs[chunk][:, :, i, :].reshape(-1, policy.obs_dim)
                a = actions[chunk][:, :, i].reshape(-1)
                lp_old = old_lp[chunk][:, :, i].reshape(-1)
                adv = advantages[chunk][:, :, i].reshape(-1)

                lp_all = ad.log_softmax(policy.logits_ad(i, Tensor(o)), axis=-1)
                onehot = np.eye(policy.n_actions)[a]
                lp_new = ad.tsum(ad.mul(lp_all, Tensor(onehot)), axis=-1)
                ratio = ad.exp(ad.sub(lp_new, Tensor(lp_old)))
                clipped = ad.clip_const(ratio, 1.0 - config.policy_clip, 1.0 + config.policy_clip)
                surrogate = ad.minimum(
                    ad.mul(ratio, Tensor(adv)), ad.mul(clipped, Tensor(adv))
                )
                entropy = -ad.tsum(ad.mul(ad.exp(lp_all), lp_all), axis=-1)
                actor_terms.append(-ad.tmean(surrogate))
                entropy_terms.append(ad.tmean(entropy))

                cen = central[chunk].reshape(-1, critic.central_dim)
                v_old = old_v[chunk][:, :, i].reshape(-1)
                target = value_targets[chunk][:, :, i].reshape(-1)
                v_new = ad.reshape(critic.values_ad(i, Tensor(cen)), (-1,))
                v_clip = ad.add(
                    ad.clip_const(
                        ad.sub(v_new, Tensor(v_old)), -config.value_clip, config.value_clip
                    ),
                    Tensor(v_old),
                )
                err = ad.pow_const(ad.sub(v_new, Tensor(target)), 2.0)
                err_clip = ad.pow_const(ad.sub(v_clip, Tensor(target)), 2.0)
                critic_terms.append(ad.mul(ad.tmean(ad.maximum(err, err_clip)), 0.5))

            surrogate_loss = actor_terms[0]
            entropy_bonus = entropy_terms[0]
            for term in actor_terms[1:]:
                surrogate_loss = ad.add(surrogate_loss, term)
            for term in entropy_terms[1:]:
                entropy_bonus = ad.add(entropy_bonus, term)
            actor_loss = ad.sub(surrogate_loss, ad.mul(entropy_bonus, config.entropy_pen))
            ad.backward(actor_loss)
            policy_opt.step()

            critic_loss = critic_terms[0]
            for term in critic_terms[1:]:
                critic_loss = ad.add(critic_loss, term)
            ad.backward(critic_loss)
            critic_opt.step()

            policy_losses.append(surrogate_loss.item() / policy.n_agents)
            value_losses.append(critic_loss.item() / policy.n_agents)
            entropies.append(entropy_bonus.item() / policy.n_agents)

    return {
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
        "entropy": float(np.mean(entropies)),
    }


class Trainer:
    """Owns all mutable training state for one (env, mode, seed) run."""

    def __init__(
        self,
        env_name: str,
        mode: RedistributionMode,
        trainer_config: TrainerConfig,
        model_config_overrides: dict | None,
        seed: int,
        epsilon: float = 1e-8,
    ):
        self.env_name = env_name
        self.mode = RedistributionMode(mode)
        self.config = trainer_config
        self.seed = seed
        self.epsilon = epsilon

        self.env_pool = [make_env(env_name) for _ in range(trainer_config.rollout_threads)]
        probe = self.env_pool[0]
        self.central_dim = probe.n_agents * probe.obs_dim + probe.state_dim

        self.policy = DiscretePolicy(
            probe.obs_dim, probe.n_actions, probe.n_agents,
            hidden=trainer_config.policy_hidden, seed=seed,
        )
        self.critic = CentralCritic(
            self.central_dim, probe.n_agents, hidden=trainer_config.v_hidden, seed=seed + 1
        )
        self.policy_opt = Adam(
            self.policy.named_params(),
            lr=trainer_config.policy_lr,
            weight_decay=trainer_config.policy_weight_decay,
            grad_clip=trainer_config.grad_clip_actor,
        )
        self.critic_opt = Adam(
            self.critic.named_params(),
            lr=trainer_config.v_value_lr,
            weight_decay=trainer_config.v_weight_decay,
            grad_clip=trainer_config.grad_clip_critic_v,
        )
        self.popart = PopArt(
            trainer_config.popart_decay,
            probe.n_agents if trainer_config.popart_per_agent else None,
        )

        self.model: RewardModel | None = None
        if self.mode in MODEL_BACKED_MODES:
            overrides = dict(model_config_overrides or {})
            if self.mode == RedistributionMode.NO_OUTCOME:
                overrides["condition_on_outcome"] = False
            if self.mode == RedistributionMode.NO_INVERSE_DYNAMICS:
                overrides["use_inverse_dynamics"] = False
            cfg = RewardModelConfig(
                obs_dim=probe.obs_dim,
                n_actions=probe.n_actions,
                n_agents=probe.n_agents,
                state_dim=probe.state_dim,
                max_timesteps=probe.horizon,
                **overrides,
            )
            self.model = RewardModel(cfg, seed=seed + 2)

        self.buffer = TrajectoryBuffer(capacity=trainer_config.buffer_capacity)
        self.action_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self.buffer_rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        self.ppo_rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

        self.iteration = 0
        self.total_episodes = 0
        self.model_updates = 0
        self.episodes_at_last_model_update = 0
        self.equivalence_violations = 0
        self.last_rm_losses: tuple[float, float] | None = None
        self.event_writer = None

    # -- shaped rewards with warmup -----------------------------------------

    def _shaped_outcomes(self, episodes: list[Episode]):
        warmup = (
            self.mode in MODEL_BACKED_MODES
            and self.mode != RedistributionMode.NO_NORMALIZATION
            and self.model_updates == 0
        )
        if self.mode == RedistributionMode.UNIFORM or warmup:
            shaped = make_redistributor(RedistributionMode.UNIFORM, None, self.epsilon)
        else:
            shaped = make_redistributor(self.mode, self.model, self.epsilon)
        return [shaped(e) for e in episodes]

    # -- one iteration -------------------------------------------------------

    def run_iteration(self) -> dict:
        cfg = self.config
        base = self.total_episodes

        def seed_for_slot(slot):
            return (self.seed * 1_000_003 + base + slot) % 2**63

        episodes = collect_rollouts(
            self.policy, self.critic, self.env_pool, seed_for_slot, self.action_rng
        )
        if not episodes:
            raise TrainerError("all rollout slots failed", self.iteration)
        if self.event_writer is not None:
            for offset, e in enumerate(episodes):
                for event in e.debug_events or []:
                    self.event_writer({"episode": base + offset, **event})
        self.total_episodes += len(episodes)
        for e in episodes:
            self.buffer.push(e)

        outcomes = self._shaped_outcomes(episodes)
        deltas, temporal_entropies, agent_entropies = [], [], []
        for ep, out in zip(episodes, outcomes):
            if self.mode == RedistributionMode.NO_NORMALIZATION:
                if not out.equivalent:
                    self.equivalence_violations += 1
            elif not out.equivalent:
                raise TrainerError(
                    "return equivalence violated on a conserving mode", self.iteration
                )
            if out.weights is not None:
                w = out.weights
                deltas.append(delta_k(w))
                temporal_entropies.append(_entropy(w.temporal))
                rows = w.agent[~w.empty_timesteps]
                agent_entropies.extend(_entropy(row) for row in rows)

        if self.mode != RedistributionMode.NO_NORMALIZATION:
            mean_r = float(np.mean([e.team_reward for e in episodes]))
            doubled = float(
                np.mean([out.rewards.sum() + e.team_reward for e, out in zip(episodes, outcomes)])
            )
            if abs(doubled - 2.0 * mean_r) > RETURN_EQUIV_TOL * max(1.0, abs(2.0 * mean_r)):
                raise TrainerError("objective-doubling identity violated", self.iteration)

        E, T, N = len(episodes), episodes[0].T, episodes[0].N
        returns = np.zeros((E, T, N))
        advantages = np.zeros((E, T, N))
        for j, (ep, out) in enumerate(zip(episodes, outcomes)):
            ret, _ = compute_returns_and_gae(
                out.rewards, np.zeros_like(out.rewards), cfg.gamma, cfg.gae_lambda
            )
            returns[j] = ret
        self.popart.update(returns.reshape(-1, N))
        targets = self.popart.normalize(returns)
        for j, (ep, out) in enumerate(zip(episodes, outcomes)):
            values_denorm = self.popart.denormalize(ep.values)
            _, adv = compute_returns_and_gae(out.rewards, values_denorm, cfg.gamma, cfg.gae_lambda)
            advantages[j] = adv

        stats = ppo_update(
            self.policy,
            self.critic,
            self.policy_opt,
            self.critic_opt,
            episodes,
            advantages,
            targets,
            cfg,
            self.ppo_rng,
        )
        for key in ("policy_loss", "value_loss", "entropy"):
            if not np.isfinite(stats[key]):
                raise TrainerError(f"non-finite {key}", self.iteration)

        if (
            self.model is not None
            and self.total_episodes - self.episodes_at_last_model_update
            >= self.model.config.update_freq
        ):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # small-buffer resampling is expected early
                curve = self.model.train_on_buffer(self.buffer, self.buffer_rng)
            self.model_updates += 1
            self.episodes_at_last_model_update = self.total_episodes
            self.last_rm_losses = (curve[-1]["regression"], curve[-1]["inverse_dynamics"])
            if not np.isfinite(curve[-1]["total"]):
                raise TrainerError("non-finite reward-model loss", self.iteration)

        self.iteration += 1
        delta_arr = np.concatenate(deltas) if deltas else None
        row = {
            "iteration": self.iteration,
            "episodes": self.total_episodes,
            "mean_return": float(np.mean([e.team_reward for e in episodes])),
            "success_rate": float(np.mean([e.team_reward == 1.0 for e in episodes])),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
            "rm_regression_loss": None if self.last_rm_losses is None else self.last_rm_losses[0],
            "rm_id_loss": None if self.last_rm_losses is None else self.last_rm_losses[1],
            "delta_mean": None if delta_arr is None else float(delta_arr.mean()),
            "delta_min": None if delta_arr is None else float(delta_arr.min()),
            "delta_max": None if delta_arr is None else float(delta_arr.max()),
            "weight_entropy_temporal": (
                float(np.mean(temporal_entropies)) if temporal_entropies else None
            ),
            "weight_entropy_agent": float(np.mean(agent_entropies)) if agent_entropies else None,
            "equivalence_violations": self.equivalence_violations,
            "rm_age_episodes": (
                None if self.model is None
                else self.total_episodes - self.episodes_at_last_model_update
            ),
        }
        return row

    def train(
        self, episode_budget: int, metrics_writer=None, checkpoint_cb=None, event_writer=None
    ) -> list[dict]:
        """Run until the episode budget is reached; emits one metrics row per
        iteration. On a non-finite loss the current state is checkpointed
        (when a callback is provided) and training halts."""
        rows = []
        self.event_writer = event_writer
        while self.total_episodes < episode_budget:
            try:
                row = self.run_iteration()
            except TrainerError:
                if checkpoint_cb is not None:
                    checkpoint_cb(self, "fault")
                raise
            rows.append(row)
            if metrics_writer is not None:
                metrics_writer(row)
            if checkpoint_cb is not None:
                checkpoint_cb(self, "periodic")
        return rows

    # -- persistence ----------------------------------------------------------

    def rng_states(self) -> dict:
        states = {
            "actions": self.action_rng.bit_generator.state,
            "buffer": self.buffer_rng.bit_generator.state,
            "ppo": self.ppo_rng.bit_generator.state,
        }
        if self.model is not None:
            states["model"] = self.model.rng.bit_generator.state
        return states

    def load_rng_states(self, states: dict) -> None:
        self.action_rng.bit_generator.state = states["actions"]
        self.buffer_rng.bit_generator.state = states["buffer"]
        self.ppo_rng.bit_generator.state = states["ppo"]
        if self.model is not None and "model" in states:
            self.model.rng.bit_generator.state = states["model"]

    def counters(self) -> dict:
        return {
            "iteration": self.iteration,
            "total_episodes": self.total_episodes,
            "model_updates": self.model_updates,
            "episodes_at_last_model_update": self.episodes_at_last_model_update,
            "equivalence_violations": self.equivalence_violations,
            "last_rm_regression": None if self.last_rm_losses is None else self.last_rm_losses[0],
            "last_rm_id": None if self.last_rm_losses is None else self.last_rm_losses[1],
        }

    def load_counters(self, c: dict) -> None:
        self.iteration = c["iteration"]
        self.total_episodes = c["total_episodes"]
        self.model_updates = c["model_updates"]
        self.episodes_at_last_model_update = c["episodes_at_last_model_update"]
        self.equivalence_violations = c["equivalence_violations"]
        if c.get("last_rm_regression") is not None:
            self.last_rm_losses = (c["last_rm_regression"], c["last_rm_id"])

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.policy.named_params().items():
            out[f"policy/{name}"] = p.data
        for name, p in self.critic.named_params().items():
            out[f"critic/{name}"] = p.data
        out.update(self.policy_opt.state_tensors("policy_opt"))
        out.update(self.critic_opt.state_tensors("critic_opt"))
        out.update(self.popart.state_tensors("popart"))
        if self.model is not None:
            out.update(self.model.state_tensors("rm"))
        out["buffer/size"] = np.array([float(len(self.buffer))])
        out["buffer/next_slot"] = np.array([float(self.buffer._next_slot)])
        for idx, ep in enumerate(self.buffer.episodes):
            prefix = f"buffer/{idx}"
            out[f"{prefix}/obs"] = ep.obs
            out[f"{prefix}/actions"] = ep.actions.astype(float)
            out[f"{prefix}/active"] = ep.active.astype(float)
            out[f"{prefix}/global_states"] = ep.global_states
            out[f"{prefix}/team_reward"] = np.array([ep.team_reward])
            if ep.log_probs is not None:
                out[f"{prefix}/log_probs"] = ep.log_probs
                out[f"{prefix}/values"] = ep.values
            if ep.policy_probs is not None:
                out[f"{prefix}/policy_probs"] = ep.policy_probs
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.policy.named_params().items():
            p.data = tensors[f"policy/{name}"].copy()
        for name, p in self.critic.named_params().items():
            p.data = tensors[f"critic/{name}"].copy()
        self.policy_opt.load_state_tensors("policy_opt", tensors)
        self.critic_opt.load_state_tensors("critic_opt", tensors)
        self.popart.load_state_tensors("popart", tensors)
        if self.model is not None:
            self.model.load_state_tensors(tensors, "rm")
        size = int(tensors["buffer/size"][0])
        self.buffer.episodes = []
        self.buffer._next_slot = int(tensors["buffer/next_slot"][0])
        for idx in range(size):
            prefix = f"buffer/{idx}"
            self.buffer.episodes.append(
                Episode(
                    obs=tensors[f"{prefix}/obs"].copy(),
                    actions=tensors[f"{prefix}/actions"].astype(np.int64),
                    active=tensors[f"{prefix}/active"].astype(bool),
                    global_states=tensors[f"{prefix}/global_states"].copy(),
                    team_reward=float(tensors[f"{prefix}/team_reward"][0]),
                    log_probs=tensors.get(f"{prefix}/log_probs"),
                    values=tensors.get(f"{prefix}/values"),
                    policy_probs=tensors.get(f"{prefix}/policy_probs"),
                )
            )
