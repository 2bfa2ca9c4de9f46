"""Numeric substrate: float64 tensors, reverse-mode autodiff, Adam."""

from .checkpoint import CheckpointError, load_params, save_params
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    embedding,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    record_kinks,
    relu,
    reshape,
    scale,
    set_debug,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    swap_last,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
