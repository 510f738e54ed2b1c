from .tensor import Tape, Tensor, active_tape, constant, lift, parameter
from . import ops
from .optim import OptimizerState, optimizer_step
from . import nn
from . import gradcheck

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "constant",
    "lift",
    "parameter",
    "ops",
    "OptimizerState",
    "optimizer_step",
    "nn",
    "gradcheck",
]
