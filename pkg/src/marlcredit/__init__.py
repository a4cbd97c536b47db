"""Episodic multi-agent credit assignment laboratory.

Deterministic temporal-agent reward redistribution with return equivalence
by construction, a learned hindsight reward model, a MAPPO-style trainer
on toy cooperative environments, and verification tooling for the method's
formal properties.
"""

from .analysis import RedistributionMode
from .redistribution import (
    DEFAULT_EPSILON,
    PotentialSeries,
    RedistributedRewards,
    RedistributionWeights,
    ScoreMatrix,
    aggregate_scores,
    agent_weights,
    compute_weights,
    delta_k,
    potential_series,
    redistribute,
    temporal_only_redistribution,
    temporal_weights,
    uniform_redistribution,
    verify_telescoping,
)
from .reward_model import RewardModel, RewardModelConfig
from .trainer import Trainer, TrainerConfig

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_EPSILON",
    "PotentialSeries",
    "RedistributedRewards",
    "RedistributionMode",
    "RedistributionWeights",
    "RewardModel",
    "RewardModelConfig",
    "ScoreMatrix",
    "Trainer",
    "TrainerConfig",
    "aggregate_scores",
    "agent_weights",
    "compute_weights",
    "delta_k",
    "potential_series",
    "redistribute",
    "temporal_only_redistribution",
    "temporal_weights",
    "uniform_redistribution",
    "verify_telescoping",
]
