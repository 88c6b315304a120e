"""Minimal reverse-mode differentiation, layers and optimizers on numpy."""

from navdistill.tensornet.checkpoint import (
    CheckpointError,
    FingerprintError,
    load_checkpoint,
    load_into,
    read_checkpoint,
    save_checkpoint,
)
from navdistill.tensornet.layers import MLP, Conv2d, Linear, Module, ParamSet
from navdistill.tensornet.optim import OptimizerError, adam_step, ema_update, global_grad_norm, lr_schedule
from navdistill.tensornet.tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    conv2d,
    conv_output_size,
    div,
    exp,
    flatten,
    fully_connected,
    gaussian_log_prob,
    getitem,
    is_grad_enabled,
    l2_normalize,
    log,
    logsumexp,
    matmul,
    mean,
    minimum,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
