"""Graph transformer for predicting deep ice-layer thickness from shallow layers.

Everything runs on a small float64 reverse-mode autodiff engine over numpy.
"""
from .model import GritModel, ModelConfig, count_parameters, forward, predict
from .training import TrainConfig, train

__all__ = ["GritModel", "ModelConfig", "TrainConfig", "count_parameters", "forward", "predict",
           "train"]
__version__ = "0.1.0"
