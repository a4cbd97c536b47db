"""Hindsight reward model: dual temporal/agent attention over complete joint
trajectories, final-outcome conditioning, a contribution-score head, and an
inverse-dynamics regularizer.

The model only ever sees finished episodes (it never acts), so temporal
attention is bidirectional. Its scores feed the deterministic
redistribution in `redistribution`; the return-equivalence guarantee is
structural and holds for arbitrary, even untrained, parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episodes import Episode, EpisodeBatch, TrajectoryBuffer, stack_episodes
from .optim import Adam
from .redistribution import (
    DEFAULT_EPSILON,
    RedistributedRewards,
    ScoreMatrix,
    redistribute,
)

MASK_NEG = -1e9


@dataclass
class RewardModelConfig:
    """Dimensions and training knobs for the reward model."""

    obs_dim: int
    n_actions: int
    n_agents: int
    state_dim: int
    max_timesteps: int
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 3
    dropout: float = 0.0
    lambda_id: float = 5e-2
    lr: float = 5e-4
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    batch_size: int = 128
    update_freq: int = 200
    update_epochs: int = 200
    use_log_target: bool = False
    condition_on_outcome: bool = True
    use_inverse_dynamics: bool = True
    id_target: str = "action"  # or "policy": match the stored policy distribution

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.lambda_id < 0:
            raise ValueError("inverse-dynamics coefficient must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.id_target not in ("action", "policy"):
            raise ValueError("id_target must be 'action' or 'policy'")


def init_params(config: RewardModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = config.embed_dim
    ff = 2 * d

    def dense(fan_in, fan_out):
        return Tensor(ad.glorot_uniform(rng, fan_in, fan_out), requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def emb(vocab):
        return Tensor(ad.embedding_init(rng, vocab, d), requires_grad=True)

    p: dict[str, Tensor] = {
        "obs_proj/W": dense(config.obs_dim, d),
        "obs_proj/b": bias(d),
        "act_emb": emb(config.n_actions),
        "agent_emb": emb(config.n_agents),
        "pos_emb": emb(config.max_timesteps),
    }
    for l in range(config.depth):
        for block in ("tattn", "aattn"):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[f"layer{l}/{block}/{w}"] = dense(d, d)
        for ln in ("ln_t", "ln_a", "ln_f"):
            p[f"layer{l}/{ln}/g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"layer{l}/{ln}/b"] = bias(d)
        p[f"layer{l}/ff/W1"] = dense(d, ff)
        p[f"layer{l}/ff/b1"] = bias(ff)
        p[f"layer{l}/ff/W2"] = dense(ff, d)
        p[f"layer{l}/ff/b2"] = bias(d)
    p.update(
        {
            "outcome/W1": dense(config.state_dim, d),
            "outcome/b1": bias(d),
            "outcome/W2": dense(d, d),
            "outcome/b2": bias(d),
            "score/W1": dense(2 * d, d),
            "score/b1": bias(d),
            "score/W2": dense(d, 1),
            "score/b2": bias(1),
            "state_proj/W": dense(config.state_dim, d),
            "state_proj/b": bias(d),
            "id/W1": dense(3 * d, d),
            "id/b1": bias(d),
            "id/W2": dense(d, config.n_actions),
            "id/b2": bias(config.n_actions),
            "id_start": Tensor(rng.normal(0.0, 0.02, size=d), requires_grad=True),
        }
    )
    return p


class RewardModel:
    """Parameter container plus the forward/training passes."""

    def __init__(self, config: RewardModelConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.params = init_params(config, self.rng)
        self.optimizer = Adam(
            self.params,
            lr=config.lr,
            weight_decay=config.weight_decay,
            grad_clip=config.grad_clip,
        )

    # -- forward -----------------------------------------------------------

    def _attention(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        """Multi-head attention along the second-to-last axis of x.

        x: (..., L, D); mask: additive (..., 1, 1, L) exclusion mask.
        """
        p = self.params
        d = self.config.embed_dim
        heads = self.config.num_heads
        dh = d // heads
        lead = x.shape[:-2]
        L = x.shape[-2]

        def split_heads(t):
            t = ad.reshape(t, lead + (L, heads, dh))
            return ad.transpose(t, tuple(range(len(lead))) + (-2, -3, -1))

        q = split_heads(ad.matmul(x, p[f"{prefix}/Wq"]))
        k = split_heads(ad.matmul(x, p[f"{prefix}/Wk"]))
        v = split_heads(ad.matmul(x, p[f"{prefix}/Wv"]))
        out = ad.scaled_dot_attention(q, k, v, Tensor(mask))
        out = ad.transpose(out, tuple(range(len(lead))) + (-2, -3, -1))
        out = ad.reshape(out, lead + (L, d))
        return ad.matmul(out, p[f"{prefix}/Wo"])

    def _maybe_dropout(self, x: Tensor, train: bool) -> Tensor:
        rate = self.config.dropout
        if not train or rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= rate) / (1.0 - rate)
        return ad.mul(x, Tensor(keep))

    def _layer_norm(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return ad.add(ad.mul(ad.layer_norm(x, axis=-1), p[f"{name}/g"]), p[f"{name}/b"])

    def encode_trajectory(self, batch: EpisodeBatch, train: bool = False) -> tuple[Tensor, Tensor]:
        """Per-(t, i) latents plus the final-outcome embedding Z.

        Each layer applies temporal attention per agent across timesteps,
        then agent attention per timestep across agents; both exclude
        inactive positions. Deterministic at dropout 0.
        """
        cfg = self.config
        p = self.params
        B, T, N = batch.actions.shape
        if T > cfg.max_timesteps:
            raise ValueError(f"episode length {T} exceeds configured maximum {cfg.max_timesteps}")
        if N != cfg.n_agents or batch.obs.shape[-1] != cfg.obs_dim:
            raise ValueError("episode batch does not match the model's configured dimensions")

        x = ad.add(ad.matmul(Tensor(batch.obs), p["obs_proj/W"]), p["obs_proj/b"])
        x = ad.add(x, ad.embed_lookup(p["act_emb"], batch.actions))
        x = ad.add(x, ad.embed_lookup(p["agent_emb"], np.broadcast_to(np.arange(N), (B, T, N))))
        x = ad.add(
            x, ad.embed_lookup(p["pos_emb"], np.broadcast_to(np.arange(T)[:, None], (B, T, N)))
        )

        # additive key-exclusion masks from the activity grid
        inactive = ~batch.active
        t_mask = np.where(inactive.transpose(0, 2, 1)[:, :, None, None, :], MASK_NEG, 0.0)
        a_mask = np.where(inactive[:, :, None, None, :], MASK_NEG, 0.0)

        for l in range(cfg.depth):
            xt = ad.transpose(x, (0, 2, 1, 3))  # (B, N, T, D)
            att = self._attention(xt, t_mask, f"layer{l}/tattn")
            att = ad.transpose(att, (0, 2, 1, 3))
            x = self._layer_norm(ad.add(x, self._maybe_dropout(att, train)), f"layer{l}/ln_t")

            att = self._attention(x, a_mask, f"layer{l}/aattn")  # (B, T, N, D)
            x = self._layer_norm(ad.add(x, self._maybe_dropout(att, train)), f"layer{l}/ln_a")

            h = ad.gelu(ad.add(ad.matmul(x, p[f"layer{l}/ff/W1"]), p[f"layer{l}/ff/b1"]))
            h = ad.add(ad.matmul(h, p[f"layer{l}/ff/W2"]), p[f"layer{l}/ff/b2"])
            x = self._layer_norm(ad.add(x, self._maybe_dropout(h, train)), f"layer{l}/ln_f")

        if cfg.condition_on_outcome:
            final = Tensor(batch.global_states[:, -1, :])
            z = ad.gelu(ad.add(ad.matmul(final, p["outcome/W1"]), p["outcome/b1"]))
            z = ad.add(ad.matmul(z, p["outcome/W2"]), p["outcome/b2"])
        else:
            z = Tensor(np.zeros((B, cfg.embed_dim)))
        return x, z

    def _score_from_latent(self, latent: Tensor, z: Tensor, batch: EpisodeBatch) -> Tensor:
        B, T, N = batch.actions.shape
        zb = ad.expand(ad.reshape(z, (B, 1, 1, self.config.embed_dim)), latent.shape)
        h = ad.concat([latent, zb], axis=-1)
        h = ad.gelu(ad.add(ad.matmul(h, self.params["score/W1"]), self.params["score/b1"]))
        h = ad.add(ad.matmul(h, self.params["score/W2"]), self.params["score/b2"])
        c = ad.reshape(h, (B, T, N))
        return ad.mul(c, Tensor(batch.active.astype(float)))  # inactive cells masked to 0

    def _score_tensor(self, batch: EpisodeBatch, train: bool = False) -> Tensor:
        latent, z = self.encode_trajectory(batch, train=train)
        return self._score_from_latent(latent, z, batch)

    def score(self, episode: Episode) -> ScoreMatrix:
        """Unnormalized contribution scores c[t, i] for one episode."""
        c = self._score_tensor(stack_episodes([episode]))
        return ScoreMatrix(scores=c.data[0], active=episode.active)

    def score_batch(self, episodes: list[Episode]) -> np.ndarray:
        """Scores for a batch of same-shape episodes, as a (B, T, N) array."""
        return self._score_tensor(stack_episodes(episodes)).data

    def _id_logits_tensor(self, batch: EpisodeBatch, latent: Tensor) -> Tensor:
        """Inverse-dynamics logits for every (t, i) from global-state context.

        Input per cell: embedding of s_t, embedding of s_{t+1}, and the
        agent's own latent at t-1 (a learned start token at t = 0).
        """
        p = self.params
        B, T, N = batch.actions.shape
        d = self.config.embed_dim
        s_emb = ad.add(ad.matmul(Tensor(batch.global_states), p["state_proj/W"]), p["state_proj/b"])
        cur = ad.expand(ad.reshape(ad.slice_axis(s_emb, 1, 0, T), (B, T, 1, d)), (B, T, N, d))
        nxt = ad.expand(ad.reshape(ad.slice_axis(s_emb, 1, 1, T + 1), (B, T, 1, d)), (B, T, N, d))
        start = ad.expand(ad.reshape(p["id_start"], (1, 1, 1, d)), (B, 1, N, d))
        prev = ad.concat([start, ad.slice_axis(latent, 1, 0, T - 1)], axis=1)
        h = ad.concat([cur, nxt, prev], axis=-1)
        h = ad.gelu(ad.add(ad.matmul(h, p["id/W1"]), p["id/b1"]))
        return ad.add(ad.matmul(h, p["id/W2"]), p["id/b2"])

    def inverse_dynamics_logits(self, episode: Episode, t: int, i: int) -> np.ndarray:
        """Action logits predicting agent i's action at step t."""
        if not 0 <= t < episode.T:
            raise ValueError(f"t={t} outside [0, {episode.T})")
        if not 0 <= i < episode.N:
            raise ValueError(f"agent index {i} outside [0, {episode.N})")
        batch = stack_episodes([episode])
        latent, _ = self.encode_trajectory(batch)
        logits = self._id_logits_tensor(batch, latent)
        return logits.data[0, t, i]

    # -- training ----------------------------------------------------------

    def _targets(self, team_rewards: np.ndarray) -> np.ndarray:
        if not self.config.use_log_target:
            return team_rewards
        if (team_rewards <= -1.0).any():
            raise ValueError("log regression target requires team rewards > -1")
        return np.log1p(team_rewards)

    def model_loss(self, episodes: list[Episode], train: bool = False):
        """Composite loss over a batch: reward regression plus the
        inverse-dynamics regularizer scaled by lambda.

        Returns (loss Tensor, components dict with float values).
        """
        cfg = self.config
        batch = stack_episodes(episodes)
        B, T, N = batch.actions.shape
        active = Tensor(batch.active.astype(float))

        latent, z = self.encode_trajectory(batch, train=train)
        c = self._score_from_latent(latent, z, batch)

        residual = ad.sub(Tensor(self._targets(batch.team_rewards)), ad.tsum(c, axis=(1, 2)))
        reg = ad.tmean(ad.mul(residual, residual))

        components = {"regression": reg.item()}
        loss = reg
        if cfg.use_inverse_dynamics and cfg.lambda_id > 0.0:
            logits = self._id_logits_tensor(batch, latent)
            if cfg.id_target == "policy":
                if batch.policy_probs is None:
                    raise ValueError("id_target='policy' needs stored policy distributions")
                target = batch.policy_probs
            else:
                target = np.eye(cfg.n_actions)[batch.actions]
            ce = ad.cross_entropy_logits(logits, Tensor(target))
            id_mean = ad.tmean(ad.tsum(ad.mul(ce, active), axis=(1, 2)))
            components["inverse_dynamics"] = id_mean.item()
            loss = ad.add(loss, ad.mul(id_mean, cfg.lambda_id))
        else:
            components["inverse_dynamics"] = 0.0
        components["total"] = loss.item()
        return loss, components

    def train_on_buffer(self, buffer: TrajectoryBuffer, rng: np.random.Generator) -> list[dict]:
        """Off-policy update rounds per the configured cadence.

        Each round samples a batch, runs one Adam step on the composite
        loss, and records the loss components.
        """
        curve = []
        for round_idx in range(self.config.update_epochs):
            episodes = buffer.sample(rng, self.config.batch_size)
            self.optimizer.zero_grad()
            loss, components = self.model_loss(episodes, train=True)
            ad.backward(loss)
            self.optimizer.step()
            components["round"] = round_idx
            curve.append(components)
        return curve

    def shaped_rewards(
        self, episode: Episode, epsilon: float = DEFAULT_EPSILON
    ) -> RedistributedRewards:
        """Scores composed with the deterministic redistribution; the only
        path by which the trainer receives model-derived rewards."""
        return redistribute(self.score(episode), episode.team_reward, epsilon)

    # -- persistence -------------------------------------------------------

    def state_tensors(self, prefix: str = "rm") -> dict[str, np.ndarray]:
        out = {f"{prefix}/param/{k}": p.data for k, p in self.params.items()}
        out.update(self.optimizer.state_tensors(f"{prefix}/adam"))
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "rm") -> None:
        for k, p in self.params.items():
            p.data = tensors[f"{prefix}/param/{k}"].copy()
        self.optimizer.load_state_tensors(f"{prefix}/adam", tensors)
