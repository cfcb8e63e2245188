"""5-DoF motion regression network: hand-rolled forward/backward + Adam."""

from evtrack.regressor.model import (
    MotionRegressor,
    NetConfig,
    TrainConfig,
    mse_loss,
)
from evtrack.regressor.data import TrainingPair, make_training_pair

__all__ = [
    "MotionRegressor",
    "NetConfig",
    "TrainConfig",
    "mse_loss",
    "TrainingPair",
    "make_training_pair",
]
