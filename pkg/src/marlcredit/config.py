"""Experiment configuration: flat dotted-key text files, presets, overrides.

Key names mirror the hyperparameter tables (comp_dim, inv_dyn_loss_coef,
model_upd_freq, entropy_pen, ...) so a config can be diffed against them
directly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .trainer import TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration; carries line/key diagnostics."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_seeds(raw: str) -> list[int]:
    parts = [p.strip() for p in str(raw).split(",") if p.strip()]
    if not parts:
        raise ValueError("seeds list is empty")
    return [int(p) for p in parts]


# key -> (parser, default); None default means required
SCHEMA: dict[str, tuple] = {
    "env.name": (str, "keytreasure"),
    "run.mode": (str, "tar2"),
    "run.seeds": (_parse_seeds, [0]),
    "run.episode_budget": (int, 2000),
    "run.checkpoint_every": (int, 0),
    "run.epsilon": (float, 1e-8),
    "run.debug_events": (_parse_bool, False),
    # trainer (common MAPPO table)
    "trainer.gamma": (float, 0.99),
    "trainer.gae_lambda": (float, 0.95),
    "trainer.ppo_epochs": (int, 15),
    "trainer.ppo_batch_size": (int, 30),
    "trainer.policy_lr": (float, 5e-4),
    "trainer.policy_weight_decay": (float, 0.0),
    "trainer.policy_hidden_shape": (int, 64),
    "trainer.v_value_lr": (float, 5e-4),
    "trainer.v_weight_decay": (float, 0.0),
    "trainer.v_hidden_shape": (int, 64),
    "trainer.grad_clip_actor": (float, 0.5),
    "trainer.grad_clip_critic_v": (float, 0.5),
    "trainer.policy_clip": (float, 0.2),
    "trainer.value_clip": (float, 0.2),
    "trainer.entropy_pen": (float, 1e-2),
    "trainer.num_rollout_threads": (int, 10),
    "trainer.popart_decay": (float, 0.999),
    "trainer.popart_per_agent": (_parse_bool, False),
    "trainer.normalize_advantages": (_parse_bool, True),
    "trainer.advantage_norm_per_agent": (_parse_bool, True),
    "trainer.buffer_capacity": (int, 2048),
    # reward model (method table)
    "model.num_heads": (int, 4),
    "model.depth": (int, 3),
    "model.dropout": (float, 0.0),
    "model.comp_dim": (int, 64),
    "model.batch_size": (int, 128),
    "model.lr": (float, 5e-4),
    "model.weight_decay": (float, 0.0),
    "model.inv_dyn_loss_coef": (float, 5e-2),
    "model.grad_clip_val": (float, 10.0),
    "model.model_upd_freq": (int, 200),
    "model.model_upd_epochs": (int, 200),
    "model.use_log_target": (_parse_bool, False),
    "model.condition_on_outcome": (_parse_bool, True),
    "model.use_inverse_dynamics": (_parse_bool, True),
    "model.id_target": (str, "action"),
}

VALID_MODES = (
    "tar2",
    "uniform",
    "temporal_only",
    "no_normalization",
    "no_outcome",
    "no_inverse_dynamics",
)

PRESETS: dict[str, str] = {
    "keytreasure_tar2": """
env.name = keytreasure
run.mode = tar2
run.episode_budget = 2000
run.seeds = 0,1,2,3,4
model.comp_dim = 32
model.depth = 2
model.batch_size = 64
model.model_upd_epochs = 100
""",
    "keytreasure_uniform": """
env.name = keytreasure
run.mode = uniform
run.episode_budget = 2000
run.seeds = 0,1,2,3,4
""",
    "switches_uniform": """
env.name = switches
run.mode = uniform
run.episode_budget = 2000
run.seeds = 0,1,2
""",
    "switches_tar2": """
env.name = switches
run.mode = tar2
run.episode_budget = 2000
run.seeds = 0,1,2
model.comp_dim = 32
model.depth = 2
model.batch_size = 64
model.model_upd_epochs = 100
""",
}


def parse_config_text(text: str) -> dict:
    """Parse `dotted.key = value` lines into a validated flat dict."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def resolve_key(key: str) -> str:
    """Exact dotted key, or a unique suffix like 'entropy_pen'."""
    if key in SCHEMA:
        return key
    matches = [k for k in SCHEMA if k.endswith("." + key) or k.split(".", 1)[1] == key]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: matches {matches}")


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        key, raw_value = (part.strip() for part in item.split("=", 1))
        full = resolve_key(key)
        parser, _ = SCHEMA[full]
        try:
            out[full] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"bad override value for {full!r}: {exc}") from exc
    return out


def normalized_text(values: dict) -> str:
    """Canonical serialization: every schema key, sorted, one per line."""
    full = {}
    for key, (parser, default) in SCHEMA.items():
        full[key] = values.get(key, default)
    lines = []
    for key in sorted(full):
        v = full[key]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# Orchestration knobs that may change between a checkpoint and its resume.
HASH_EXEMPT = {"run.seeds", "run.episode_budget", "run.checkpoint_every", "run.debug_events"}


def config_hash(values: dict) -> str:
    lines = [
        line
        for line in normalized_text(values).splitlines()
        if line.split(" =", 1)[0] not in HASH_EXEMPT
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    """Typed view over the flat config."""

    env_name: str
    mode: str
    seeds: list[int]
    episode_budget: int
    checkpoint_every: int
    epsilon: float
    debug_events: bool
    trainer: TrainerConfig
    model_overrides: dict
    flat: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.flat)

    @property
    def text(self) -> str:
        return normalized_text(self.flat)


def build_experiment_config(values: dict) -> ExperimentConfig:
    def get(key):
        parser, default = SCHEMA[key]
        return values.get(key, default)

    mode = get("run.mode")
    if mode not in VALID_MODES:
        raise ConfigError(f"run.mode must be one of {VALID_MODES}, got {mode!r}")
    if get("run.episode_budget") <= 0:
        raise ConfigError("run.episode_budget must be positive")
    if not get("run.seeds"):
        raise ConfigError("run.seeds must be non-empty")

    trainer = TrainerConfig(
        gamma=get("trainer.gamma"),
        gae_lambda=get("trainer.gae_lambda"),
        ppo_epochs=get("trainer.ppo_epochs"),
        ppo_batch_size=get("trainer.ppo_batch_size"),
        policy_lr=get("trainer.policy_lr"),
        policy_weight_decay=get("trainer.policy_weight_decay"),
        policy_hidden=get("trainer.policy_hidden_shape"),
        v_value_lr=get("trainer.v_value_lr"),
        v_weight_decay=get("trainer.v_weight_decay"),
        v_hidden=get("trainer.v_hidden_shape"),
        grad_clip_actor=get("trainer.grad_clip_actor"),
        grad_clip_critic_v=get("trainer.grad_clip_critic_v"),
        policy_clip=get("trainer.policy_clip"),
        value_clip=get("trainer.value_clip"),
        entropy_pen=get("trainer.entropy_pen"),
        rollout_threads=get("trainer.num_rollout_threads"),
        popart_decay=get("trainer.popart_decay"),
        popart_per_agent=get("trainer.popart_per_agent"),
        normalize_advantages=get("trainer.normalize_advantages"),
        advantage_norm_per_agent=get("trainer.advantage_norm_per_agent"),
        buffer_capacity=get("trainer.buffer_capacity"),
    )
    model_overrides = {
        "num_heads": get("model.num_heads"),
        "depth": get("model.depth"),
        "dropout": get("model.dropout"),
        "embed_dim": get("model.comp_dim"),
        "batch_size": get("model.batch_size"),
        "lr": get("model.lr"),
        "weight_decay": get("model.weight_decay"),
        "lambda_id": get("model.inv_dyn_loss_coef"),
        "grad_clip": get("model.grad_clip_val"),
        "update_freq": get("model.model_upd_freq"),
        "update_epochs": get("model.model_upd_epochs"),
        "use_log_target": get("model.use_log_target"),
        "condition_on_outcome": get("model.condition_on_outcome"),
        "use_inverse_dynamics": get("model.use_inverse_dynamics"),
        "id_target": get("model.id_target"),
    }
    return ExperimentConfig(
        env_name=get("env.name"),
        mode=mode,
        seeds=list(get("run.seeds")),
        episode_budget=get("run.episode_budget"),
        checkpoint_every=get("run.checkpoint_every"),
        epsilon=get("run.epsilon"),
        debug_events=get("run.debug_events"),
        trainer=trainer,
        model_overrides=model_overrides,
        flat=dict(values),
    )


def load_config(name_or_path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Resolve a preset name or a file path, apply overrides, validate."""
    if name_or_path in PRESETS:
        text = PRESETS[name_or_path]
    else:
        try:
            with open(name_or_path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(
                f"config {name_or_path!r} is neither a preset "
                f"({', '.join(sorted(PRESETS))}) nor a readable file: {exc}"
            ) from exc
    values = parse_config_text(text)
    if overrides:
        values = apply_overrides(values, overrides)
    return build_experiment_config(values)
