"""Attention-model construction heuristic for the capacitated VRP with dynamic re-encoding."""

from .baselines import brute_force_optimal, nearest_neighbor, two_opt
from .checkpoint import CheckpointError
from .estimator import DynamicAttentionRouter
from .instance import (
    InfeasibleSolutionError,
    Solution,
    VrpInstance,
    generate_instance,
    split_routes,
    tour_length,
    validate_solution,
)
from .params import Architecture, ModelParams
from .rollout import construct, construct_many, logprob_of
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "CheckpointError",
    "DynamicAttentionRouter",
    "InfeasibleSolutionError",
    "ModelParams",
    "Solution",
    "TrainConfig",
    "VrpInstance",
    "brute_force_optimal",
    "construct",
    "construct_many",
    "evaluate",
    "generate_instance",
    "logprob_of",
    "nearest_neighbor",
    "split_routes",
    "tour_length",
    "train",
    "two_opt",
    "validate_solution",
]
