"""Differentiable layer kernels built on services.tensor.

Convolutions are im2col + matmul with explicit analytic backward passes.
Layouts follow the usual channels-first convention: conv1d takes (B, C, T),
conv2d takes (B, C, H, W).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import ConfigError, DimensionError, LookupIndexError
from services.tensor import Tensor, add, reshape

ACTIVATIONS = ("identity", "relu", "leaky_relu", "elu", "gelu", "tanh")


def _as_pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    first, second = value
    return int(first), int(second)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) input and (O,C,KH,KW) kernel, got {x.shape} and {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = weight.shape
    if channels != kernel_channels:
        raise DimensionError(f"conv2d: input has {channels} channels but kernel expects {kernel_channels}")
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(padding)
    if sh < 1 or sw < 1:
        raise DimensionError(f"conv stride must be >= 1, got {(sh, sw)}")
    padded_h, padded_w = height + 2 * ph, width + 2 * pw
    if kh > padded_h or kw > padded_w:
        raise DimensionError(
            f"conv kernel {(kh, kw)} is longer than the padded input {(padded_h, padded_w)}"
        )
    out_h = (padded_h - kh) // sh + 1
    out_w = (padded_w - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (B, Ho, Wo, C, KH, KW) -> rows of receptive fields
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kh * kw)
    w_mat = weight.data.reshape(out_channels, -1)
    out = (cols @ w_mat.T).reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    x_shape, dtype = x.shape, x.dtype

    def backward(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_rows.T @ cols).reshape(weight.shape)
        dcols = (g_rows @ w_mat).reshape(batch, out_h, out_w, channels, kh, kw)
        dxp = np.zeros((batch, channels, padded_h, padded_w), dtype=dtype)
        h_stop, w_stop = sh * (out_h - 1) + 1, sw * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + h_stop:sh, j:j + w_stop:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = dxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]]
        return grad_x, grad_w

    result = Tensor._result(np.ascontiguousarray(out), (x, weight), backward, "conv2d")
    if bias is not None:
        result = add(result, reshape(bias, (1, out_channels, 1, 1)))
    return result


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Output length is floor((T + 2*padding - K) / stride) + 1."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects (B,C,T) input and (O,C,K) kernel, got {x.shape} and {kernel.shape}")
    batch, channels, length = x.shape
    out_channels, kernel_channels, size = kernel.shape
    if length + 2 * padding < size:
        raise DimensionError(f"conv kernel of length {size} is longer than the padded input {length + 2 * padding}")
    out = conv2d(
        reshape(x, (batch, channels, 1, length)),
        reshape(kernel, (out_channels, kernel_channels, 1, size)),
        bias,
        stride=(1, stride),
        padding=(0, padding),
    )
    return reshape(out, (batch, out_channels, out.shape[-1]))


def conv_transpose1d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution; kernel layout is (C_in, C_out, K).

    Output length is (T - 1) * stride - 2 * padding + K + output_padding.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(
            f"conv_transpose1d expects (B,C,T) input and (C,O,K) kernel, got {x.shape} and {kernel.shape}"
        )
    batch, channels, length = x.shape
    kernel_channels, out_channels, size = kernel.shape
    if channels != kernel_channels:
        raise DimensionError(f"conv_transpose1d: input has {channels} channels but kernel expects {kernel_channels}")
    if stride < 1:
        raise DimensionError(f"conv stride must be >= 1, got {stride}")
    full_length = (length - 1) * stride + size + output_padding
    out_length = full_length - 2 * padding
    if out_length < 1:
        raise DimensionError(f"conv_transpose1d: padding {padding} leaves no output samples")

    w_mat = kernel.data.reshape(channels, out_channels * size)
    x_rows = x.data.transpose(0, 2, 1)  # (B, T, C)
    cols = (x_rows @ w_mat).reshape(batch, length, out_channels, size)
    full = np.zeros((batch, out_channels, full_length), dtype=x.dtype)
    stop = stride * (length - 1) + 1
    for k in range(size):
        full[:, :, k:k + stop:stride] += cols[:, :, :, k].transpose(0, 2, 1)
    out = full[:, :, padding:padding + out_length]

    def backward(g):
        g_full = np.zeros((batch, out_channels, full_length), dtype=g.dtype)
        g_full[:, :, padding:padding + out_length] = g
        g_cols = np.empty((batch, length, out_channels, size), dtype=g.dtype)
        for k in range(size):
            g_cols[:, :, :, k] = g_full[:, :, k:k + stop:stride].transpose(0, 2, 1)
        g_cols = g_cols.reshape(batch, length, out_channels * size)
        grad_x = (g_cols @ w_mat.T).transpose(0, 2, 1)
        grad_w = np.einsum("btc,btk->ck", x_rows, g_cols).reshape(kernel.shape)
        return grad_x, grad_w

    result = Tensor._result(np.ascontiguousarray(out), (x, kernel), backward, "conv_transpose1d")
    if bias is not None:
        result = add(result, reshape(bias, (1, out_channels, 1)))
    return result


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine gain and bias."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    features = x.shape[-1] if x.ndim else 0
    if features == 0:
        raise DimensionError("layer_norm needs a non-empty feature axis")
    if gain.shape != (features,) or bias.shape != (features,):
        raise DimensionError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match {features} features")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    gain_data = gain.data
    out = x_hat * gain_data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        d_hat = g * gain_data
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise LookupIndexError(f"embedding ids must be integers, got dtype {ids.dtype}")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise LookupIndexError(f"embedding id out of range [0, {rows}): {ids.min()}..{ids.max()}")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        np.add.at(grad, ids, g)
        return (grad,)

    return Tensor._result(table.data[ids], (table,), backward, "embedding")


_GELU_C = math.sqrt(2.0 / math.pi)


def activation(x: Tensor, kind: str = "relu", slope: float = 0.2) -> Tensor:
    data = x.data
    if kind == "identity":
        return x
    if kind == "relu":
        mask = data > 0
        return Tensor._result(data * mask, (x,), lambda g: (g * mask,), kind)
    if kind == "leaky_relu":
        scale = np.where(data > 0, 1.0, slope).astype(data.dtype)
        return Tensor._result(data * scale, (x,), lambda g: (g * scale,), kind)
    if kind == "elu":
        negative = np.expm1(np.minimum(data, 0.0))
        positive = data > 0
        out = np.where(positive, data, negative)
        deriv = np.where(positive, 1.0, negative + 1.0).astype(data.dtype)
        return Tensor._result(out, (x,), lambda g: (g * deriv,), kind)
    if kind == "gelu":
        # tanh approximation; the backward pass differentiates the same formula
        inner = _GELU_C * (data + 0.044715 * data ** 3)
        t = np.tanh(inner)
        out = 0.5 * data * (1.0 + t)
        deriv = 0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * data ** 2)
        return Tensor._result(out, (x,), lambda g: (g * deriv,), kind)
    if kind == "tanh":
        out = np.tanh(data)
        return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), kind)
    raise ConfigError(f"Unknown activation '{kind}', expected one of {ACTIVATIONS}")
