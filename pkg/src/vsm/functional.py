"""Differentiable layers and activations on :class:`~vsm.tensor.Tensor`.

Images are NHWC throughout; convolution kernels are ``[k, k, Cin, Cout]``.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _as_tensor


class DimensionError(ValueError):
    pass


def _same_padding(size: int, window: int, stride: int) -> tuple[int, int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + window - size, 0)
    return out, total // 2, total - total // 2


def _output_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        oh, top, bottom = _same_padding(h, k, stride)
        ow, left, right = _same_padding(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise DimensionError(f"window {k} larger than input {h}x{w} with valid padding")
        oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
        top = bottom = left = right = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, (top, bottom, left, right)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of NHWC ``x`` with ``kernel`` (TF-style SAME padding)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2:
        raise DimensionError(f"kernel must be square on axes (0, 1), got {k}x{k2}")
    if kcin != cin:
        raise DimensionError(f"channel mismatch: input axis 3 has {cin}, kernel axis 2 has {kcin}")
    if k < 1 or stride < 1:
        raise ValueError("kernel size and stride must be >= 1")
    oh, ow, (top, bottom, left, right) = _output_geometry(h, w, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    # [B, oh, ow, Cin, k, k] -> rows of Cin*k*k
    cols = windows.reshape(b * oh * ow, cin * k * k)
    kmat = kernel.data.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)
    out = (cols @ kmat).reshape(b, oh, ow, cout)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(b * oh * ow, cout)
        dk = (cols.T @ g2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        dcols = (g2 @ kmat.T).reshape(b, oh, ow, cin, k, k)
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[..., i, j]
        dx = dxp[:, top : top + h, left : left + w, :]
        return dx, dk

    return Tensor._make(out, (x, kernel), backward, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, padding: str = "same") -> Tensor:
    """Per-window maximum; ties send the gradient to the first element in scan order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NHWC input, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    b, h, w, c = x.shape
    oh, ow, (top, bottom, left, right) = _output_geometry(h, w, window, stride, padding)
    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=-np.inf)
    windows = sliding_window_view(xp, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    flat = windows.reshape(b, oh, ow, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    bi, hi, wi, ci = np.indices((b, oh, ow, c), sparse=False)
    rows = hi * stride + arg // window
    cols_ = wi * stride + arg % window
    padded_shape = xp.shape
    overlapping = stride < window

    def backward(g):
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        if overlapping:
            np.add.at(dxp, (bi, rows, cols_, ci), g)
        else:
            dxp[bi, rows, cols_, ci] += g
        return (dxp[:, top : top + h, left : left + w, :],)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), backward, "maxpool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [..., Din]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        dx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        dw = xd.T @ g2
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def elu(x: Tensor) -> Tensor:
    a = x.data
    neg = np.expm1(np.minimum(a, 0))
    out = np.where(a > 0, a, neg)
    return Tensor._make(out, (x,), lambda g: (g * np.where(a > 0, 1, neg + 1),), "elu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    a = x.data
    scale = np.where(a > 0, 1, slope).astype(a.dtype)
    return Tensor._make(a * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1 / (1 + np.exp(-x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; ``rate`` is the probability of zeroing a unit."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel normalization over all but the last axis.

    Running statistics are updated in place while training.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.data.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * var.data.reshape(-1)
        normed = centered / (var + eps).sqrt()
    else:
        normed = (x - running_mean) / np.sqrt(running_var + eps).astype(x.dtype)
    return normed * gamma + beta


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over the last axis, with broadcasting."""
    diff = _as_tensor(a) - _as_tensor(b)
    return (diff * diff).sum(axis=-1)


def cosine_distance(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    dot = (a * b).sum(axis=-1)
    na = ((a * a).sum(axis=-1) + eps).sqrt()
    nb = ((b * b).sum(axis=-1) + eps).sqrt()
    return 1 - dot / (na * nb)


__all__ = [
    "DimensionError",
    "batch_norm",
    "conv2d",
    "cosine_distance",
    "dropout",
    "elu",
    "leaky_relu",
    "linear",
    "log_softmax",
    "maxpool2d",
    "relu",
    "sigmoid",
    "softmax",
    "squared_distance",
]
