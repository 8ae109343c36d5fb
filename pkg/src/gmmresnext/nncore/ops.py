"""Differentiable operators used by the embedding network.

Tensors follow the (batch, channels, time) layout for sequence data; the
elementwise ops broadcast like numpy. Statistical reductions accumulate in
float64 regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, unbroadcast

Operand = Union[Tensor, np.ndarray, float, int]


def _data(x: Operand):
    return x.data if isinstance(x, Tensor) else x


def _shape(x: Operand) -> tuple:
    return np.shape(_data(x))


def _parents(*xs: Operand) -> list:
    return [x for x in xs if isinstance(x, Tensor)]


def _grads_for(xs: Sequence[Operand], grads: Sequence[Optional[np.ndarray]]) -> list:
    return [g for x, g in zip(xs, grads) if isinstance(x, Tensor)]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    out = np.add(_data(a), _data(b))

    def backward(g):
        return _grads_for((a, b), (unbroadcast(g, _shape(a)), unbroadcast(g, _shape(b))))

    return Tensor.from_op(out, _parents(a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    out = np.subtract(_data(a), _data(b))

    def backward(g):
        return _grads_for((a, b), (unbroadcast(g, _shape(a)), unbroadcast(-g, _shape(b))))

    return Tensor.from_op(out, _parents(a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = np.multiply(ad, bd)

    def backward(g):
        ga = unbroadcast(g * bd, _shape(a)) if isinstance(a, Tensor) else None
        gb = unbroadcast(g * ad, _shape(b)) if isinstance(b, Tensor) else None
        return _grads_for((a, b), (ga, gb))

    return Tensor.from_op(out, _parents(a, b), backward)


def div(a: Operand, b: Operand) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = np.divide(ad, bd)

    def backward(g):
        ga = unbroadcast(g / bd, _shape(a)) if isinstance(a, Tensor) else None
        gb = unbroadcast(-g * out / bd, _shape(b)) if isinstance(b, Tensor) else None
        return _grads_for((a, b), (ga, gb))

    return Tensor.from_op(out, _parents(a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    out = xd ** exponent
    return Tensor.from_op(out, [x], lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, [x], lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), [x], lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, [x], lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor.from_op(out, [x], lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, [x], lambda g: (g * (1.0 - out * out),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    mask = x.data > floor
    out = np.where(mask, x.data, floor).astype(x.dtype)
    return Tensor.from_op(out, [x], lambda g: (g * mask,))


def where(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``. ``mask`` is constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, _data(a), _data(b))

    def backward(g):
        ga = unbroadcast(np.where(mask, g, 0), _shape(a)) if isinstance(a, Tensor) else None
        gb = unbroadcast(np.where(mask, 0, g), _shape(b)) if isinstance(b, Tensor) else None
        return _grads_for((a, b), (ga, gb))

    return Tensor.from_op(out, _parents(a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _normalize_axis(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), [x], backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return Tensor.from_op(x.data.reshape(shape), [x], lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor.from_op(np.transpose(x.data, axes), [x], lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(out, list(tensors), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack (B, C_i, T) tensors into (B, sum C_i, T)."""
    if len({t.shape[0] for t in tensors}) != 1 or len({t.shape[2] for t in tensors}) != 1:
        raise ValueError("concat_channels: inputs must share batch and time sizes, got "
                         + ", ".join(str(t.shape) for t in tensors))
    return concat(tensors, axis=1)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad @ bd

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), _shape(a)) if isinstance(a, Tensor) else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, _shape(b)) if isinstance(b, Tensor) else None
        return _grads_for((a, b), (ga, gb))

    return Tensor.from_op(out, _parents(a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B, in) -> (B, out) with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = matmul(x, transpose(weight, (1, 0)))
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, [x], backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, [x], backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must be {n} indices in [0, {k})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return mul(sum(mul(log_softmax(logits, axis=1), onehot)), -1.0 / n)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(clamp_min(sum(mul(x, x), axis=axis, keepdims=True), eps * eps))
    return div(x, norm)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Union[int, str] = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D cross-correlation.

    x is (B, Cin, T) and weight is (Cout, Cin // groups, K). ``padding="same"``
    is supported for stride 1 and odd K. ``groups == Cin == Cout`` is the
    depthwise case.
    """
    B, cin, T = x.shape
    cout, cin_g, K = weight.shape
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ValueError(f"conv1d: weight {weight.shape} incompatible with {cin} input channels"
                         f" and groups={groups}")
    if padding == "same":
        if stride != 1 or K % 2 == 0:
            raise ValueError("conv1d: 'same' padding needs stride 1 and odd kernel size")
        padding = (K - 1) // 2
    p = int(padding)
    t_out = (T + 2 * p - K) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv1d: input length {T} too short for kernel {K}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p))) if p else xd
    # (B, Cin, T_out, K)
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    wd = weight.data
    cout_g = cout // groups
    # every group count goes through one batched GEMM so that a grouped
    # convolution is bit-identical to convolving the channel shards separately
    cols = np.ascontiguousarray(
        win.reshape(B, groups, cin_g, t_out, K).transpose(1, 0, 3, 2, 4)
    ).reshape(groups, B * t_out, cin_g * K)
    wmat = np.ascontiguousarray(wd.reshape(groups, cout_g, cin_g * K).transpose(0, 2, 1))
    out = np.matmul(cols, wmat)  # (G, B*T_out, Cout_g)
    out = np.ascontiguousarray(
        out.reshape(groups, B, t_out, cout_g).transpose(1, 0, 3, 2)
    ).reshape(B, cout, t_out)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        g2 = np.ascontiguousarray(
            g.reshape(B, groups, cout_g, t_out).transpose(1, 0, 3, 2)
        ).reshape(groups, B * t_out, cout_g)
        gw = np.matmul(cols.transpose(0, 2, 1), g2)  # (G, Cin_g*K, Cout_g)
        gw = gw.transpose(0, 2, 1).reshape(cout, cin_g, K)
        gcols = np.matmul(g2, wmat.transpose(0, 2, 1))  # (G, B*T_out, Cin_g*K)
        gcols = gcols.reshape(groups, B, t_out, cin_g, K).transpose(1, 0, 3, 2, 4).reshape(B, cin, t_out, K)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        span = stride * (t_out - 1) + 1
        for k in range(K):
            gxp[:, :, k:k + span:stride] += gcols[:, :, :, k]
        gx = gxp[:, :, p:p + T] if p else gxp
        grads = [gx, gw.astype(wd.dtype)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return _grads_for((x, weight) + ((bias,) if bias is not None else ()), grads)

    extra = [bias] if bias is not None else []
    return Tensor.from_op(out, _parents(x, weight, *extra), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one batch-norm layer.

    ``running_mean`` and ``running_var`` are updated in place in train mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batchnorm eps must be positive")


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel over every axis except 1; x is (B, C) or (B, C, T)."""
    C = x.shape[1]
    if state.gamma.shape != (C,):
        raise ValueError(f"batchnorm: state has {state.gamma.shape[0]} channels, input has {C}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if state.training:
        n = xd.size // C
        if n < 2:
            raise ValueError("batchnorm: train mode needs more than one value per channel")
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = ((xd - mu.reshape(bshape)) ** 2).mean(axis=axes, dtype=np.float64)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var * n / (n - 1)
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype).reshape(bshape)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * inv_std
    gamma, beta = state.gamma, state.beta
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = state.training

    def backward(g):
        gg = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(xd.dtype)
        gb = np.sum(g, axis=axes, dtype=np.float64).astype(xd.dtype)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            n = xd.size // C
            s1 = gxhat.sum(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            gx = inv_std * (gxhat - s1 / n - xhat * s2 / n)
        else:
            gx = gxhat * inv_std
        return _grads_for((x, gamma, beta), (gx, gg, gb))

    return Tensor.from_op(out, _parents(x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# temporal statistics
# ---------------------------------------------------------------------------

def time_mean(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, C) average over time."""
    return mean(x, axis=2)


def time_stats(x: Tensor, floor: float = 1e-9) -> Tensor:
    """(B, C, T) -> (B, 2C) concatenated temporal mean and standard deviation."""
    mu = mean(x, axis=2)
    var = sub(mean(mul(x, x), axis=2), mul(mu, mu))
    return concat([mu, sqrt(clamp_min(var, floor))], axis=1)
