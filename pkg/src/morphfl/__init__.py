"""Federated training that grows a family of dense models to fit heterogeneous clients."""

from .model import Cell, DimensionError, Model, NumericError, WeightSet, forward, init_weights, mac_count, make_model
from .runtime import ABLATIONS, RunConfig, RunResult, run_training

__all__ = [
    "ABLATIONS",
    "Cell",
    "DimensionError",
    "Model",
    "NumericError",
    "RunConfig",
    "RunResult",
    "WeightSet",
    "forward",
    "init_weights",
    "mac_count",
    "make_model",
    "run_training",
]

__version__ = "0.1.0"
