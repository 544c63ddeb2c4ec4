"""Reward-free exploration and representation learning in finite low-rank MDPs."""

from .exceptions import ConfigurationError, ContractViolation, NumericalError, StructuralError
from .hard_instances import HardInstanceParams, build_perturbed, build_reference, enumerate_family
from .mdp import (
    EpisodicMDP,
    LowRankFactorization,
    Policy,
    RewardFunction,
    evaluate_policy,
    occupancy,
    optimal_policy,
    simulation_gap,
)
from .model_class import LowRankMLE, ModelClass, TransitionDataset, mle_fit
from .raffle import Raffle, plan_for_reward, run_exploration, system_identification_error
from .replearn import RepLearn, divergence, divergence_score
from .synthetic import make_synthetic_env

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "NumericalError",
    "StructuralError",
    "HardInstanceParams",
    "build_perturbed",
    "build_reference",
    "enumerate_family",
    "EpisodicMDP",
    "LowRankFactorization",
    "Policy",
    "RewardFunction",
    "evaluate_policy",
    "occupancy",
    "optimal_policy",
    "simulation_gap",
    "LowRankMLE",
    "ModelClass",
    "TransitionDataset",
    "mle_fit",
    "Raffle",
    "plan_for_reward",
    "run_exploration",
    "system_identification_error",
    "RepLearn",
    "divergence",
    "divergence_score",
    "make_synthetic_env",
]
