"""Small reverse-mode autodiff engine with the layers needed by the CVAE."""
from .layers import RunningStats, batchnorm1d, conv1d, deconv1d, glu, softmax
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    exp,
    log,
    no_grad,
    sigmoid,
    split,
)

__all__ = [
    "Adam",
    "AdamState",
    "RunningStats",
    "Tensor",
    "adam_step",
    "backward",
    "batchnorm1d",
    "broadcast_to",
    "clip",
    "concat",
    "conv1d",
    "deconv1d",
    "exp",
    "glu",
    "log",
    "no_grad",
    "sigmoid",
    "softmax",
    "split",
]
