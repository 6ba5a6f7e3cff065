"""Boundary-aware two-stream segmentation network in pure numpy.

Submodules: ``autodiff`` (tensors + reverse-mode tape), ``blocks``,
``network``, ``losses``, ``metrics``, ``data`` (synthetic data + ``.bseg``
files), ``train`` (Adam, schedule, checkpoints), ``gradcheck``, ``cli``.
"""
from .autodiff import ParameterStore, Tape, Tensor
from .losses import LossWeights, total_loss
from .network import ForwardOutput, NetworkSpec, forward, init_parameters, predict
from .train import TrainConfig, train

__all__ = [
    "ForwardOutput",
    "LossWeights",
    "NetworkSpec",
    "ParameterStore",
    "Tape",
    "Tensor",
    "TrainConfig",
    "forward",
    "init_parameters",
    "predict",
    "total_loss",
    "train",
]

__version__ = "0.1.0"
