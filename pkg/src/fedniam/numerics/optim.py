from __future__ import annotations

from typing import Iterable

from .tensor import ContractError, Tensor


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``p <- p - lr * (grad + weight_decay * p)``, then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step called on a parameter without a gradient")
    for p in params:
        p.data = p.data - lr * (p.grad + weight_decay * p.data)
        p.grad = None
