"""Multiscale neural operator for point-cloud flow fields, on numpy."""
from .autograd import NumericError, Tensor, no_grad
from .datagen import GenSpec, generate
from .geometry import DataError, NeighborGraph, PointSample, knn_graph
from .model import MnoConfig, MnoModel, ModuleMask, forward, init_model
from .training import MetricsReport, TrainConfig, evaluate, mae, rl2, train

__version__ = "0.1.0"

__all__ = [
    "NumericError", "Tensor", "no_grad", "GenSpec", "generate", "DataError",
    "NeighborGraph", "PointSample", "knn_graph", "MnoConfig", "MnoModel",
    "ModuleMask", "forward", "init_model", "MetricsReport", "TrainConfig",
    "evaluate", "mae", "rl2", "train",
]
