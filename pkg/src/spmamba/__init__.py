"""Selective state-space detector building blocks on a small numpy autodiff engine.

Modules
-------
tensor, nn      float64 tensors with reverse-mode autodiff and layer containers
ssm             zero-order-hold discretisation and the selective scan
blocks          stem, vision clue merge, ODSS block, PSA, SPPELAN
model, detect   toy detector, loss, decoding and NMS
metrics         IoU matching, precision/recall, AP and mAP
data            synthetic underwater-style scenes
train           SGD training loop and checkpoints
checks          finite-difference gradient suite
cli             the ``spmamba`` command
"""
from .errors import (DataError, DeterminismError, DimensionError, DivergenceError, EvaluationError, LoadError,
                     NumericalError, SPMambaError, StabilityError, StateError, UsageError, ConfigError)
from .tensor import Tensor, backward, checked
from .gradcheck import GradCheckReport, grad_check
from .model import ABLATION_GROUPS, Detector, ModelConfig, build_model
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ABLATION_GROUPS", "ConfigError", "DataError", "DeterminismError", "Detector", "DimensionError",
    "DivergenceError", "EvaluationError", "GradCheckReport", "LoadError", "ModelConfig", "NumericalError",
    "SPMambaError", "StabilityError", "StateError", "Tensor", "TrainConfig", "UsageError", "backward",
    "build_model", "checked", "grad_check",
]
