from . import functional
from .checkpoint import CheckpointError
from .functional import ShapeError
from .gradcheck import GradCheckReport, grad_check, wide
from .nn import BatchNorm2d, Conv2d, Linear, Module, SeparableConv2d
from .optim import SGD, AdamW, NonFiniteGradientError, OptimizerState, WarmupStepDecay, make_optimizer
from .tensor import COMPACT, WIDE, Tensor, as_tensor, concat, no_grad, stack, where

__all__ = [
    "functional",
    "CheckpointError",
    "ShapeError",
    "GradCheckReport",
    "grad_check",
    "wide",
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "Module",
    "SeparableConv2d",
    "SGD",
    "AdamW",
    "NonFiniteGradientError",
    "OptimizerState",
    "WarmupStepDecay",
    "make_optimizer",
    "COMPACT",
    "WIDE",
    "Tensor",
    "as_tensor",
    "concat",
    "no_grad",
    "stack",
    "where",
]
