"""Minimal dense fp64 tensor engine with reverse-mode autodiff."""

from stmrgnn.autodiff.tensor import Tape, Tensor, active_tape, backward, set_debug_checks
from stmrgnn.autodiff import ops  # attaches Tensor operator dunders
from stmrgnn.autodiff.ops import (
    absolute,
    add,
    as_tensor,
    batch_matmul,
    causal_conv1d,
    dropout,
    gated_conv1d,
    layer_norm,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tensor_sum,
    transpose,
)
from stmrgnn.autodiff.optim import AdamState, adam_step, zero_grads
from stmrgnn.autodiff.gradcheck import grad_check, numeric_gradient

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "set_debug_checks",
    "ops",
    "absolute",
    "add",
    "as_tensor",
    "batch_matmul",
    "causal_conv1d",
    "dropout",
    "gated_conv1d",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "tensor_sum",
    "transpose",
    "AdamState",
    "adam_step",
    "zero_grads",
    "grad_check",
    "numeric_gradient",
]
