"""Auditing machine unlearning through SGD proof replay, and the attacks
that slip past it."""

from .datasets import (BackdoorSpec, Dataset, gen_blobs, inject_backdoor, load_csv, load_idx,
                       split_dirichlet, split_random)
from .model import ModelConfig, ParameterVector, init_params
from .proofs import Proof, ProofStep, UpdateRule, deserialize, serialize
from .unlearning import (TrainingHyper, adv_retrain, forge, retrain_naive, train,
                         unlearn_hit_probability)
from .verification import (backdoor_verify, epsilon_bound, estimate_constants,
                           learning_rate_bounds, type2_error, verify_reproducing)

__version__ = "0.1.0"

__all__ = [
    "BackdoorSpec", "Dataset", "ModelConfig", "ParameterVector", "Proof", "ProofStep",
    "TrainingHyper", "UpdateRule", "adv_retrain", "backdoor_verify", "deserialize",
    "epsilon_bound", "estimate_constants", "forge", "gen_blobs", "init_params",
    "inject_backdoor", "learning_rate_bounds", "load_csv", "load_idx", "retrain_naive",
    "serialize", "split_dirichlet", "split_random", "train", "type2_error",
    "unlearn_hit_probability", "verify_reproducing",
]
