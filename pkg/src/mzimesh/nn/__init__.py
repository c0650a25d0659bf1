"""Small numpy neural-network stack and the surrogate models built on it."""

from .layers import ConvTranspose1d, Dense, Reshape, Sequential, Tanh
from .surrogate import (
    KINDS,
    EarlyStopping,
    MinMax,
    SurrogateArchitecture,
    TrainedSurrogate,
    TrainingError,
    default_architecture,
    evaluate_rmse,
    hyperparameter_search,
    load_surrogate,
    train,
)

__all__ = [
    "ConvTranspose1d", "Dense", "Reshape", "Sequential", "Tanh", "KINDS", "EarlyStopping", "MinMax",
    "SurrogateArchitecture", "TrainedSurrogate", "TrainingError", "default_architecture", "evaluate_rmse",
    "hyperparameter_search", "load_surrogate", "train",
]
