"""Hierarchical physics-informed neural networks on a small numpy autodiff engine."""

from .estimator import HiPINNRegressor
from .hitrain import (
    CompositeModel,
    HierarchySchedule,
    LevelSpec,
    Reference,
    TrainingDiverged,
    TrainingTrace,
    train,
)
from .nets import FourierEmbeddingSpec, FourierNetSpec, MlpSpec, init_network
from .problems import ProblemSpec, get_problem, sample
from .refsolve import Grid2D, GridField, reference_solution, relative_l2_error

__version__ = "0.1.0"

__all__ = [
    "CompositeModel",
    "FourierEmbeddingSpec",
    "FourierNetSpec",
    "Grid2D",
    "GridField",
    "HiPINNRegressor",
    "HierarchySchedule",
    "LevelSpec",
    "MlpSpec",
    "ProblemSpec",
    "Reference",
    "TrainingDiverged",
    "TrainingTrace",
    "get_problem",
    "init_network",
    "reference_solution",
    "relative_l2_error",
    "sample",
    "train",
]
