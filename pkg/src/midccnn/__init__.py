"""Densely connected CNN with attention-based multiple-instance pooling, on a numpy autodiff core."""

from .dccnn import ConfigError, DccnnConfig, build, shape_plan
from .mil import MilHead
from .network import HeadConfig, Network
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DccnnConfig",
    "HeadConfig",
    "MilHead",
    "Network",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "gradcheck",
    "no_grad",
    "shape_plan",
    "train",
]
