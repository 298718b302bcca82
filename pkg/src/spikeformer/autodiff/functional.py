"""Fused layer primitives: affine maps, normalisations, convolution, pooling."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ops import _mac_counter
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _count(macs: int) -> None:
    box = _mac_counter.get()
    if box is not None:
        box[0] += int(macs)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias`` with ``weight`` of shape (Din, Dout)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    lead = x.shape[:-1]
    din, dout = weight.shape
    x2 = x.data.reshape(-1, din)
    w = weight.data
    out = x2 @ w
    if bias is not None:
        out += bias.data
    _count(x2.shape[0] * din * dout)

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ w.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out.reshape(*lead, dout), parents, bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: parameters {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation of an (N, C, H, W) tensor.

    Training mode normalises with the statistics over (N, H, W) and updates the
    running statistics in place (unbiased variance, exponential moving average).
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm: input has {c} channels but parameters have {gamma.shape[0]}")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
    out = xhat * gd + bd

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (b, i, j); columns are (channel, ki, kj)."""
    cin = xp.shape[1]
    if k == 1:
        return xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, cin)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * k * k)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) with a (Cout, Cin, k, k) kernel, no bias.

    ``padding`` defaults to ``k // 2``, which preserves the extent at stride 1.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    p = k // 2 if padding is None else padding
    if not 0 <= p < k:
        raise ValueError(f"conv2d: padding {p} must lie in [0, {k})")
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output extent underflow for input {h}x{w}, kernel {k}, stride {stride}")
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    _count(cols.shape[0] * cols.shape[1] * cout)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = stride-1 correlation of the dilated, padded output
            # gradient with the spatially flipped, channel-swapped kernel
            q = k - 1 - p
            gd = np.zeros((b, cout, h + k - 1, w + k - 1), dtype=g.dtype)
            gd[:, :, q:q + (ho - 1) * stride + 1:stride, q:q + (wo - 1) * stride + 1:stride] = g
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = (_im2col(gd, k, 1, h, w) @ flipped.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        return gx, gk

    return make_result(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def avg_pool_2x2(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 windows (stride 2) of a (B, C, H, W) tensor."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool_2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return make_result(out, (x,), bw, "avg_pool_2x2")
