"""Differentiable operations over :class:`~stmrgnn.autodiff.tensor.Tensor`.

Every op computes its forward value with numpy, then (only when a tape is
active and some input requires a gradient) records a closure implementing the
exact reverse rule. Broadcasting follows numpy semantics; gradients of
broadcast operands are summed back to the operand's shape.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from stmrgnn.errors import ContractError, DimensionError, SequenceTooShortError
from stmrgnn.autodiff.tensor import Tensor, active_tape

TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(data: np.ndarray, inputs: Sequence[Tensor]) -> tuple[Tensor, bool]:
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    record = req and active_tape() is not None
    return out, record


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, rec = _result(a.data + b.data, (a, b))
    if rec:
        na, nb = a.requires_grad, b.requires_grad
        sa, sb = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, sa) if na else None,
                    _unbroadcast(g, sb) if nb else None)

        active_tape().record((a, b), out, bwd)
    return out


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, rec = _result(a.data - b.data, (a, b))
    if rec:
        na, nb = a.requires_grad, b.requires_grad
        sa, sb = a.shape, b.shape

        def bwd(g):
            return (_unbroadcast(g, sa) if na else None,
                    _unbroadcast(-g, sb) if nb else None)

        active_tape().record((a, b), out, bwd)
    return out


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out, rec = _result(a.data * b.data, (a, b))
    if rec:
        na, nb = a.requires_grad, b.requires_grad
        ad, bd = a.data, b.data

        def bwd(g):
            return (_unbroadcast(g * bd, ad.shape) if na else None,
                    _unbroadcast(g * ad, bd.shape) if nb else None)

        active_tape().record((a, b), out, bwd)
    return out


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out, rec = _result(-a.data, (a,))
    if rec:
        active_tape().record((a,), out, lambda g: (-g,))
    return out


def absolute(a: TensorLike) -> Tensor:
    """|x|, with subgradient 0 at x == 0."""
    a = as_tensor(a)
    out, rec = _result(np.abs(a.data), (a,))
    if rec:
        sign = np.sign(a.data)
        active_tape().record((a,), out, lambda g: (g * sign,))
    return out


def sqrt(a: TensorLike) -> Tensor:
    """Elementwise square root; gradient defined as 0 at x == 0."""
    a = as_tensor(a)
    data = np.sqrt(a.data)
    out, rec = _result(data, (a,))
    if rec:
        inv = np.where(data > 0.0, 0.5 / np.where(data > 0.0, data, 1.0), 0.0)
        active_tape().record((a,), out, lambda g: (g * inv,))
    return out


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out, rec = _result(np.maximum(a.data, 0.0), (a,))
    if rec:
        mask = (a.data > 0.0).astype(np.float64)
        active_tape().record((a,), out, lambda g: (g * mask,))
    return out


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # overflow-safe: exp of a non-positive argument only
    z = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out, rec = _result(data, (a,))
    if rec:
        local = data * (1.0 - data)
        active_tape().record((a,), out, lambda g: (g * local,))
    return out


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out, rec = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if rec:
        shape = a.shape
        active_tape().record(
            (a,), out, lambda g: (_expand_reduced(g, shape, axis, keepdims),))
    return out


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    out, rec = _result(data, (a,))
    if rec:
        shape = a.shape
        scale = a.size / max(data.size, 1)

        def bwd(g):
            return (_expand_reduced(g, shape, axis, keepdims) / scale,)

        active_tape().record((a,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """numpy-semantics matrix product (leading batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e
    out, rec = _result(data, (a, b))
    if rec:
        na, nb = a.requires_grad, b.requires_grad
        ad, bd = a.data, b.data

        def bwd(g):
            ga = gb = None
            if na:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if nb:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        active_tape().record((a, b), out, bwd)
    return out


def batch_matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Strict batched product of two stacks of matrices: [u,p,q] @ [u,q,r]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(
            f"batch_matmul expects 3-d stacks, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(
            f"batch_matmul shapes incompatible: {a.shape} @ {b.shape}")
    return matmul(a, b)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    out, rec = _result(a.data.reshape(shape), (a,))
    if rec:
        orig = a.shape
        active_tape().record((a,), out, lambda g: (g.reshape(orig),))
    return out


def transpose(a: TensorLike, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out, rec = _result(np.transpose(a.data, axes), (a,))
    if rec:
        inverse = tuple(np.argsort(axes))
        active_tape().record((a,), out, lambda g: (np.transpose(g, inverse),))
    return out


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("stack of zero tensors")
    out, rec = _result(np.stack([t.data for t in ts], axis=axis), (*ts,))
    if rec:
        needs = [t.requires_grad for t in ts]

        def bwd(g):
            return tuple(
                np.take(g, i, axis=axis) if needs[i] else None
                for i in range(len(ts)))

        active_tape().record(tuple(ts), out, bwd)
    return out


# ---------------------------------------------------------------------------
# model-specific primitives


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out, rec = _result(data, (a,))
    if rec:
        def bwd(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        active_tape().record((a,), out, bwd)
    return out


def layer_norm(a: TensorLike, gain: TensorLike, offset: TensorLike,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``gain`` and ``offset`` are 1-d of the normalized axis extent.
    """
    a, gain, offset = as_tensor(a), as_tensor(gain), as_tensor(offset)
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim or a.shape[ax] == 0:
        raise DimensionError(f"layer_norm axis {axis} invalid for shape {a.shape}")
    extent = a.shape[ax]
    if gain.shape != (extent,) or offset.shape != (extent,):
        raise DimensionError(
            f"layer_norm gain/offset must have shape ({extent},), "
            f"got {gain.shape} and {offset.shape}")
    bshape = [1] * a.ndim
    bshape[ax] = extent
    gain_b = gain.data.reshape(bshape)
    offset_b = offset.data.reshape(bshape)

    mu = a.data.mean(axis=ax, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain_b + offset_b
    out, rec = _result(data, (a, gain, offset))
    if rec:
        na, ng, no = a.requires_grad, gain.requires_grad, offset.requires_grad
        other = tuple(i for i in range(a.ndim) if i != ax)

        def bwd(g):
            ga = gg = go = None
            if ng:
                gg = (g * xhat).sum(axis=other)
            if no:
                go = g.sum(axis=other)
            if na:
                gx = g * gain_b
                m1 = gx.mean(axis=ax, keepdims=True)
                m2 = (gx * xhat).mean(axis=ax, keepdims=True)
                ga = inv * (gx - m1 - xhat * m2)
            return ga, gg, go

        active_tape().record((a, gain, offset), out, bwd)
    return out


def causal_conv1d(x: TensorLike, kernel: TensorLike,
                  bias: Optional[TensorLike] = None) -> Tensor:
    """Valid (no padding) 1-d convolution along the last axis.

    x: [n, c_in, time], kernel: [c_out, c_in, K], bias: [c_out].
    Output step t depends only on input steps t .. t+K-1, and the sequence
    shortens by exactly K-1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(
            f"causal_conv1d expects x [n,c_in,time] and kernel [c_out,c_in,K], "
            f"got {x.shape} and {kernel.shape}")
    n, c_in, time_len = x.shape
    c_out, kc_in, k = kernel.shape
    if kc_in != c_in:
        raise DimensionError(
            f"kernel input channels {kc_in} != data channels {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {bias.shape}")
    if time_len < k:
        raise SequenceTooShortError(
            f"sequence length {time_len} shorter than kernel width {k}")
    t_out = time_len - k + 1

    cols = _im2col(x.data, k)           # [n, t_out, c_in*K]
    w2 = kernel.data.reshape(c_out, c_in * k)
    data = np.matmul(cols, w2.T).transpose(0, 2, 1)
    if bias is not None:
        data = data + bias.data[None, :, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    out, rec = _result(data, inputs)
    if rec:
        nx, nk = x.requires_grad, kernel.requires_grad
        nb = bias is not None and bias.requires_grad

        def bwd(g):
            gx = gk = gb = None
            if nk:
                # contract over (n, t): [c_out, c_in*K] via BLAS
                gk = np.tensordot(g, cols, axes=([0, 2], [0, 1])).reshape(c_out, c_in, k)
            if nx:
                gcols = np.tensordot(g, w2, axes=([1], [0]))  # [n, t_out, c_in*K]
                gx = _col2im(gcols, c_in, k, time_len)
            if nb:
                gb = g.sum(axis=(0, 2))
            grads = (gx, gk) if bias is None else (gx, gk, gb)
            return grads

        active_tape().record(inputs, out, bwd)
    return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[n, c, time] -> contiguous [n, time-k+1, c*k] patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    n, c, t_out, _ = windows.shape
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n, t_out, c * k)


def _col2im(gcols: np.ndarray, c_in: int, k: int, time_len: int) -> np.ndarray:
    """Scatter patch gradients [n, t_out, c_in*k] back to [n, c_in, time]."""
    n, t_out, _ = gcols.shape
    g4 = gcols.reshape(n, t_out, c_in, k).transpose(0, 2, 3, 1)
    gx = np.zeros((n, c_in, time_len))
    for kk in range(k):
        gx[:, :, kk:kk + t_out] += g4[:, :, kk, :]
    return gx


def gated_conv1d(x: TensorLike, w1: TensorLike, b1: TensorLike,
                 w2: TensorLike, b2: TensorLike) -> Tensor:
    """Fused gated temporal convolution:
    (w1 * x + b1) elementwise-scaled by sigmoid(w2 * x + b2).

    Equivalent to mul(causal_conv1d(x,w1,b1), sigmoid(causal_conv1d(x,w2,b2)))
    but shares one patch extraction and records a single tape node.
    """
    x, w1, b1, w2, b2 = map(as_tensor, (x, w1, b1, w2, b2))
    if x.ndim != 3 or w1.ndim != 3 or w2.ndim != 3:
        raise DimensionError(
            f"gated_conv1d expects x [n,c_in,time] and kernels [c_out,c_in,K], "
            f"got {x.shape}, {w1.shape}, {w2.shape}")
    if w1.shape != w2.shape:
        raise DimensionError(
            f"information and gate kernels must match: {w1.shape} vs {w2.shape}")
    n, c_in, time_len = x.shape
    c_out, kc_in, k = w1.shape
    if kc_in != c_in:
        raise DimensionError(f"kernel input channels {kc_in} != data channels {c_in}")
    if b1.shape != (c_out,) or b2.shape != (c_out,):
        raise DimensionError(f"biases must have shape ({c_out},)")
    if time_len < k:
        raise SequenceTooShortError(
            f"sequence length {time_len} shorter than kernel width {k}")
    t_out = time_len - k + 1

    cols = _im2col(x.data, k)                       # [n, t_out, c_in*k]
    wa = w1.data.reshape(c_out, c_in * k)
    wb = w2.data.reshape(c_out, c_in * k)
    info = np.matmul(cols, wa.T) + b1.data          # [n, t_out, c_out]
    pre = np.matmul(cols, wb.T) + b2.data
    z = np.exp(-np.abs(pre))
    gate = np.where(pre >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    data = (info * gate).transpose(0, 2, 1)         # [n, c_out, t_out]
    inputs = (x, w1, b1, w2, b2)
    out, rec = _result(data, inputs)
    if rec:
        needs = tuple(t.requires_grad for t in inputs)

        def bwd(g):
            gt = g.transpose(0, 2, 1)               # [n, t_out, c_out]
            d_info = gt * gate
            d_pre = gt * info * gate * (1.0 - gate)
            gx = gw1 = gb1 = gw2 = gb2 = None
            if needs[1]:
                gw1 = np.tensordot(d_info, cols, axes=([0, 1], [0, 1])).reshape(
                    c_out, c_in, k)
            if needs[2]:
                gb1 = d_info.sum(axis=(0, 1))
            if needs[3]:
                gw2 = np.tensordot(d_pre, cols, axes=([0, 1], [0, 1])).reshape(
                    c_out, c_in, k)
            if needs[4]:
                gb2 = d_pre.sum(axis=(0, 1))
            if needs[0]:
                gcols = np.matmul(d_info, wa) + np.matmul(d_pre, wb)
                gx = _col2im(gcols, c_in, k, time_len)
            return gx, gw1, gb1, gw2, gb2

        active_tape().record(inputs, out, bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode. rate in [0, 1)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor._wrap(mask, False))


# ---------------------------------------------------------------------------
# operator sugar on Tensor

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
