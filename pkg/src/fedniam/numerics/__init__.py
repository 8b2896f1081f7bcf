"""Tensor arithmetic, reverse-mode gradients, SGD and finite-difference checks."""

from .gradcheck import autodiff_gradient, grad_check, numerical_gradient
from .optim import sgd_step
from .rng import RngStream
from .tensor import (
    HARD,
    ContractError,
    DegenerateRowError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cosine_matrix,
    cosine_sim,
    div,
    exp,
    getitem,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    logsumexp,
    masked_softmax,
    matmul,
    mean,
    mul,
    normalize_rows,
    quick_gelu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    swap_last,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
