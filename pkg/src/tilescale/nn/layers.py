"""Functional layers on NHWC arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)`` and returns the input gradient followed by any
parameter gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    return cols, (n, h, w, c, ho, wo)


def conv2d_forward(x, weight, bias, stride=1, pad=1):
    """``weight`` has shape (kh, kw, c_in, c_out)."""
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    cols, dims = _im2col(x, kh, kw, stride, pad)
    n, _, _, _, ho, wo = dims
    out = cols @ weight.reshape(-1, cout)
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, cout), (cols, dims, weight, stride, pad, bias is not None)


def conv2d_backward(dout, cache):
    cols, (n, h, w, c, ho, wo), weight, stride, pad, has_bias = cache
    kh, kw, cin, cout = weight.shape
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(axis=0) if has_bias else None
    dcols = (d2 @ weight.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dweight, dbias


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def avgpool_forward(x):
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    out = x[:, : 2 * ho, : 2 * wo].reshape(n, ho, 2, wo, 2, c).mean(axis=(2, 4))
    return out, x.shape


def avgpool_backward(dout, shape):
    n, h, w, c = shape
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(shape, dtype=dout.dtype)
    spread = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25
    dx[:, : 2 * ho, : 2 * wo] = spread
    return dx


def linear_forward(x, weight, bias):
    """``weight`` has shape (in, out)."""
    return x @ weight + bias, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training):
    """Per-channel batch norm over (N, H, W). Updates running stats in place when training."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[-1]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma, training)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, training = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta
