"""Self-contained numpy CNN: layers, residual regressor, Adam, training, gradient checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import TileCNNRegressor, pack_inputs, unpack_inputs
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, ModelParams, architecture, backward, forward, init_params, param_count
from .optim import AdamState, adam_step, mse_loss
from .train import Arrays, History, TrainingDivergedError, predict, train_model

__all__ = [
    "AdamState",
    "Arrays",
    "GradCheckReport",
    "History",
    "ModelConfig",
    "ModelParams",
    "TileCNNRegressor",
    "TrainingDivergedError",
    "adam_step",
    "architecture",
    "backward",
    "forward",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "mse_loss",
    "pack_inputs",
    "param_count",
    "predict",
    "save_checkpoint",
    "train_model",
    "unpack_inputs",
]
