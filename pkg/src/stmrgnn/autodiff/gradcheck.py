"""Finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from stmrgnn.errors import NumericError
from stmrgnn.autodiff.tensor import Tape, Tensor, backward


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor,
                     step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate-wise."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data)
        flat[i] = orig - step
        lo = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("function returned non-finite value during grad check")
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               step: float = 1e-6) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    Relative error per coordinate is |a - n| / (|a| + |n| + 1e-8); the max
    over coordinates is returned. ``f`` must be a deterministic scalar
    function of ``x`` alone.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        backward(y, tape)
        analytic = x.grad.copy()
    finally:
        x.requires_grad = was
        x.grad = None
    numeric = numeric_gradient(f, x, step=step)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))
