from .tensor import NonFiniteError, Parameter, Tape, TapeError, Tensor, as_tensor, backward, no_grad
from .ops import ShapeError, conv2d, global_avg_pool, scaled_dot_attention, softmax
from .nn import Conv2d, Linear, Module
from .optim import Adam, AdamState, FrozenParameterError, MissingGradientError, adam_step
from . import ops

__all__ = [
    "Adam", "AdamState", "Conv2d", "FrozenParameterError", "Linear", "MissingGradientError",
    "Module", "NonFiniteError", "Parameter", "ShapeError", "Tape", "TapeError", "Tensor",
    "adam_step", "as_tensor", "backward", "conv2d", "no_grad", "global_avg_pool", "ops",
    "scaled_dot_attention", "softmax",
]
