from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numerical_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar-valued ``fn`` at ``point``."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = grad.reshape(-1)
    for i in range(point.size):
        shift = np.zeros(point.size)
        shift[i] = eps
        shift = shift.reshape(point.shape)
        hi = fn(Tensor(point + shift)).item()
        lo = fn(Tensor(point - shift)).item()
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def autodiff_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.asarray(point, dtype=np.float64).copy(), requires_grad=True)
    backward(fn(x), [x])
    return x.grad


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-6) -> float:
    """Max over coordinates of |autodiff - fd| / max(1, |fd|)."""
    ad = autodiff_gradient(fn, point)
    fd = numerical_gradient(fn, point, eps)
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))
