from engine.tensor import GradientTape, Tensor, is_grad_enabled, no_grad
from engine.ops import (
    conv2d,
    elementwise_add,
    elementwise_mul,
    linear,
    mse_loss,
    pad_rows,
    permute,
    relu,
    reshape,
    rfft_amplitude,
    softmax,
)
from engine.optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "GradientTape",
    "Tensor",
    "adam_step",
    "conv2d",
    "elementwise_add",
    "elementwise_mul",
    "is_grad_enabled",
    "linear",
    "mse_loss",
    "no_grad",
    "pad_rows",
    "permute",
    "relu",
    "reshape",
    "rfft_amplitude",
    "softmax",
]
