"""Differentiable 1D layers used by the CVAE.

Arrays follow the (batch, channels, time) layout. Unbatched (channels, time)
inputs are accepted and returned unbatched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, StateError
from .tensor import DTYPE, Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: Tensor):
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise DimensionError(f"expected (C, N) or (B, C, N) input, got {x.shape}")


def _scatter_taps(dst, taps, stride, count):
    # dst[..., k + stride*i] += taps[..., i, k] for every tap k
    for k in range(taps.shape[-1]):
        dst[:, :, k : k + stride * (count - 1) + 1 : stride] += taps[..., k]


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 1D cross-correlation with zero padding.

    Args:
        x: input of shape (C_in, N) or (B, C_in, N).
        kernel: (C_out, C_in, K).
        bias: (C_out,) or None.

    Returns:
        Tensor of shape (..., C_out, floor((N + 2*padding - K)/stride) + 1).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    xd, squeeze = _batched(x)
    B, c_in, n = xd.shape
    c_out, c_in_k, k = kernel.shape
    if c_in_k != c_in:
        raise DimensionError(f"kernel expects {c_in_k} input channels, got {c_in}")
    n_pad = n + 2 * padding
    if k > n_pad:
        raise DimensionError(f"kernel size {k} exceeds padded length {n_pad}")
    n_out = (n_pad - k) // stride + 1

    xp = np.zeros((B, c_in, n_pad), dtype=DTYPE)
    xp[:, :, padding : padding + n] = xd
    win = sliding_window_view(xp, k, axis=2)[:, :, : stride * (n_out - 1) + 1 : stride]
    cols = win.transpose(0, 2, 1, 3).reshape(B, n_out, c_in * k)
    wmat = kernel.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).transpose(0, 2, 1)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        if squeeze:
            g = g[None]
        gt = g.transpose(0, 2, 1)
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(kernel.shape)
        dcols = (gt @ wmat).reshape(B, n_out, c_in, k).transpose(0, 2, 1, 3)
        dxp = np.zeros_like(xp)
        _scatter_taps(dxp, dcols, stride, n_out)
        gx = dxp[:, :, padding : padding + n]
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make_node(out[0] if squeeze else out, parents, backward)


def deconv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1D convolution, the adjoint of :func:`conv1d`.

    Args:
        x: input of shape (C_in, N) or (B, C_in, N).
        kernel: (C_in, C_out, K).
        bias: (C_out,) or None.

    Returns:
        Tensor of shape (..., C_out, (N - 1)*stride - 2*padding + K).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    xd, squeeze = _batched(x)
    B, c_in, n = xd.shape
    c_in_k, c_out, k = kernel.shape
    if c_in_k != c_in:
        raise DimensionError(f"kernel expects {c_in_k} input channels, got {c_in}")
    n_full = (n - 1) * stride + k
    n_out = n_full - 2 * padding
    if n_out < 1:
        raise DimensionError("transposed convolution output would be empty")

    wmat = kernel.data.reshape(c_in, c_out * k)
    xt = xd.transpose(0, 2, 1)
    taps = (xt @ wmat).reshape(B, n, c_out, k).transpose(0, 2, 1, 3)
    full = np.zeros((B, c_out, n_full), dtype=DTYPE)
    _scatter_taps(full, taps, stride, n)
    out = full[:, :, padding : padding + n_out]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        if squeeze:
            g = g[None]
        gfull = np.zeros((B, c_out, n_full), dtype=DTYPE)
        gfull[:, :, padding : padding + n_out] = g
        win = sliding_window_view(gfull, k, axis=2)[:, :, : stride * (n - 1) + 1 : stride]
        gcols = win.transpose(0, 2, 1, 3).reshape(B, n, c_out * k)
        gx = (gcols @ wmat.T).transpose(0, 2, 1)
        gw = (xt.reshape(-1, c_in).T @ gcols.reshape(-1, c_out * k)).reshape(kernel.shape)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make_node(out[0] if squeeze else np.ascontiguousarray(out), parents, backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def populated(self) -> bool:
        return self.mean is not None


def batchnorm1d(x, gamma, beta, stats: RunningStats, training: bool) -> Tensor:
    """Batch normalization over every axis except channels.

    In training mode the batch statistics are used and ``stats`` is updated
    in place with momentum 0.1; in eval mode ``stats`` is used as is.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, squeeze = _batched(x)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"affine parameters must have shape ({c},)")
    count = xd.shape[0] * xd.shape[2]
    if count < 1:
        raise DimensionError("batch norm needs at least one sample per channel")

    if training:
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        unbiased = var * count / (count - 1) if count > 1 else var
        if not stats.populated:
            stats.mean = np.zeros(c, dtype=DTYPE)
            stats.var = np.ones(c, dtype=DTYPE)
        stats.mean = (1 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * mean
        stats.var = (1 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * unbiased
    else:
        if not stats.populated:
            raise StateError("batch norm running statistics are empty")
        mean, var = stats.mean, stats.var

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        if squeeze:
            g = g[None]
        g_gamma = (g * xhat).sum(axis=(0, 2))
        g_beta = g.sum(axis=(0, 2))
        scale = (gamma.data * inv_std)[None, :, None]
        if training:
            gx = scale * (
                g
                - g_beta[None, :, None] / count
                - xhat * g_gamma[None, :, None] / count
            )
        else:
            gx = scale * g
        return (gx[0] if squeeze else gx), g_gamma, g_beta

    return make_node(out[0] if squeeze else out, (x, gamma, beta), backward)


def glu(a, b) -> Tensor:
    """Gated linear unit ``a * sigmoid(b)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"glu operands differ in shape: {a.shape} vs {b.shape}")
    gate = 0.5 * (1.0 + np.tanh(0.5 * b.data))
    ad = a.data
    return make_node(
        ad * gate, (a, b), lambda g: (g * gate, g * ad * gate * (1.0 - gate))
    )


def softmax(u, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction."""
    u = as_tensor(u)
    shifted = u.data - u.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (u,), backward)
