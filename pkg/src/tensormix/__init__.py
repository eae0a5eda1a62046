"""Low-rank probability tensor regression for multiple categorical responses."""

__version__ = "0.1.0"

from .em_solver import FitResult, PenaltySpec, SolverConfig, fit
from .model import Dataset, MixtureParams
from .simgen import SimScenario, simulate
from .tensor_core import ProbTensor, RankRDecomposition, Shape
from .tuning import PathSpec, solve_path

__all__ = [
    "Dataset",
    "FitResult",
    "MixtureParams",
    "PathSpec",
    "PenaltySpec",
    "ProbTensor",
    "RankRDecomposition",
    "Shape",
    "SimScenario",
    "SolverConfig",
    "fit",
    "simulate",
    "solve_path",
]
