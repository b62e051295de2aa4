"""Federated-learning lab for inferring a user's per-class data composition from its model updates."""

from .attack import AttackParams, AttackReport, attack_history, attack_multi_round, attack_single_round, decompose
from .config import ExperimentSpec, SpecError, reference_spec
from .data import AuxiliarySet, CompositionSpec, Dataset, generate_synthetic, load_idx, partition
from .defenses import DefenseConfig
from .fl import FLConfig, RoundRecord, fedavg, load_history, run, save_history
from .metrics import DistanceTriple, lp_distance, random_guess_baseline

__all__ = [
    "AttackParams", "AttackReport", "attack_history", "attack_multi_round", "attack_single_round", "decompose",
    "ExperimentSpec", "SpecError", "reference_spec",
    "AuxiliarySet", "CompositionSpec", "Dataset", "generate_synthetic", "load_idx", "partition",
    "DefenseConfig",
    "FLConfig", "RoundRecord", "fedavg", "load_history", "run", "save_history",
    "DistanceTriple", "lp_distance", "random_guess_baseline",
]
