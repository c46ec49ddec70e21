"""Desk-scale lab for tiny recursive grid solvers and noisy rollout inference."""

from .errors import CheckpointError, ConfigError
from .estimator import PrincipalPlane, RecursiveSolver
from .inference import (InferenceConfig, LangevinConfig, deterministic_infer,
                        ptrm_infer, run_rollouts)
from .model import ModelConfig, init_params
from .puzzles import DatasetSpec, build_dataset
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DatasetSpec", "InferenceConfig",
    "LangevinConfig", "ModelConfig", "PrincipalPlane", "RecursiveSolver",
    "TrainConfig", "build_dataset", "deterministic_infer", "fit",
    "init_params", "ptrm_infer", "run_rollouts", "__version__",
]
