"""Adam optimizer with decoupled weight decay over named parameter dicts."""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from stmrgnn.errors import ContractError
from stmrgnn.autodiff.tensor import Tensor


class AdamState:
    """First/second moment buffers plus hyperparameters for one model.

    Moments are keyed by parameter name and allocated lazily on the first
    step so the state can be built before parameters receive gradients.
    """

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
              state: AdamState) -> None:
    """One Adam update, in place. ``grads`` of None reads each ``param.grad``.

    Weight decay is decoupled: it scales the parameter directly by
    ``lr * weight_decay`` instead of being folded into the gradient.
    Parameters with a missing/None gradient are treated as gradient zero.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    lr = state.learning_rate

    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        if g.shape != m.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match moment shape "
                f"{m.shape} for parameter {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
