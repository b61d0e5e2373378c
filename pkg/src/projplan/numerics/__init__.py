from . import ops
from .nn import GroupNorm, LayerNorm, Linear, Conv1d, MLP, Module, Parameter, multi_head_attention
from .optim import Adam, NonFiniteGradient, OptimizerState, adam_step
from .tensor import ShapeError, Tensor, as_tensor, backward, no_grad

__all__ = [
    "Adam", "Conv1d", "GroupNorm", "LayerNorm", "Linear", "MLP", "Module", "NonFiniteGradient",
    "OptimizerState", "Parameter", "ShapeError", "Tensor", "adam_step", "as_tensor", "backward",
    "multi_head_attention", "no_grad", "ops",
]
