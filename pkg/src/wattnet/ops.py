"""Convolution, pooling and normalization on NCHW tensors."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionMismatchError, InvalidInputError
from .tensor import Tensor, _wrap, concat, relu, sigmoid, softmax  # noqa: F401

__all__ = [
    "conv_output_size",
    "conv2d",
    "depthwise_conv2d",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "batch_norm",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` along one spatial axis.

    "same" follows the common framework rule: out = ceil(size / stride), and the
    odd leftover pad goes after (right/bottom).
    """
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if kernel > size:
            raise ConfigurationError(f"kernel {kernel} larger than input extent {size} with valid padding")
        return (size - kernel) // stride + 1, 0, 0
    raise ConfigurationError(f"unknown padding mode {padding!r}")


def _pad(x: np.ndarray, ph: tuple, pw: tuple) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), ph, pw))


def _dense_conv_forward(xp, w, stride, ho, wo):
    n, m = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (n, m), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',O
    return out.transpose(0, 3, 1, 2), win


def _dense_conv_backward(g, win, w, xp_shape, stride, ho, wo):
    n, m = w.shape[2], w.shape[3]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,n,m
    gwin = np.tensordot(g, w, axes=([1], [0]))  # N,H',W',C,n,m
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(n):
        for j in range(m):
            gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gwin[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return gxp, gw


def _depthwise_forward(xp, w, stride, ho, wo):
    n, m = w.shape[2], w.shape[3]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=np.result_type(xp, w))
    for i in range(n):
        for j in range(m):
            out += xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] * w[
                None, :, 0, i, j, None, None
            ]
    return out


def _depthwise_backward(g, xp, w, stride, ho, wo):
    n, m = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(n):
        for j in range(m):
            sl = (slice(None), slice(None), slice(i, i + (ho - 1) * stride + 1, stride), slice(j, j + (wo - 1) * stride + 1, stride))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[None, :, 0, i, j, None, None]
    return gxp, gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same", groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) over an NCHW batch.

    ``w`` has shape ``[C_out, C_in / groups, n, m]``; ``b`` is ``[C_out]`` or None.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionMismatchError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Cg, n, m = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigurationError(f"channels in={C} out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ConfigurationError(f"weight expects {Cg} channels per group, input gives {C // groups}")
    if b is not None:
        b = _wrap(b)
        if b.shape != (O,):
            raise DimensionMismatchError(f"bias shape {b.shape} != ({O},)")
    ho, pt, pb = conv_output_size(H, n, stride, padding)
    wo, pl, pr = conv_output_size(W, m, stride, padding)
    xp = _pad(x.data, (pt, pb), (pl, pr))
    wd = w.data

    depthwise = groups == C and O == C
    if depthwise:
        out = _depthwise_forward(xp, wd, stride, ho, wo)
        cache = None
    elif groups == 1:
        out, cache = _dense_conv_forward(xp, wd, stride, ho, wo)
    else:
        og = O // groups
        parts, cache = [], []
        for gi in range(groups):
            o, win = _dense_conv_forward(xp[:, gi * Cg : (gi + 1) * Cg], wd[gi * og : (gi + 1) * og], stride, ho, wo)
            parts.append(o)
            cache.append(win)
        out = np.concatenate(parts, axis=1)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        if depthwise:
            gxp, gw = _depthwise_backward(g, xp, wd, stride, ho, wo)
        elif groups == 1:
            gxp, gw = _dense_conv_backward(g, cache, wd, xp.shape, stride, ho, wo)
        else:
            og = O // groups
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                gx_i, gw_i = _dense_conv_backward(
                    g[:, gi * og : (gi + 1) * og], cache[gi], wd[gi * og : (gi + 1) * og],
                    (N, Cg) + xp.shape[2:], stride, ho, wo,
                )
                gxp[:, gi * Cg : (gi + 1) * Cg] = gx_i
                gw[gi * og : (gi + 1) * og] = gw_i
        gx = gxp[:, :, pt : pt + H, pl : pl + W]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel convolution: ``w`` is ``[C, 1, n, m]``."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4:
        raise DimensionMismatchError(f"depthwise_conv2d expects NCHW input, got {x.shape}")
    if w.shape[0] != x.shape[1] or w.shape[1] != 1:
        raise ConfigurationError(f"depthwise weight {w.shape} does not match {x.shape[1]} input channels")
    return conv2d(x, w, b, stride=stride, padding=padding, groups=x.shape[1])


def _pool_windows(a: np.ndarray, window: int, stride: int):
    H, W = a.shape[2:]
    if window > H or window > W:
        raise ConfigurationError(f"pool window {window} larger than input {H}x{W}")
    ho = (H - window) // stride + 1
    wo = (W - window) // stride + 1
    win = sliding_window_view(a, (window, window), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win, ho, wo


def avg_pool2d(x: Tensor, window: int | None = None, stride: int | None = None) -> Tensor:
    """Average pooling with valid padding; ``window=None`` pools globally to 1x1."""
    x = _wrap(x)
    if window is None:
        return global_avg_pool(x)
    stride = stride or window
    win, ho, wo = _pool_windows(x.data, window, stride)
    out = win.mean(axis=(4, 5))
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += share
        return (gx,)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, window: int | None = None, stride: int | None = None) -> Tensor:
    """Max pooling with valid padding; ties send the gradient to the first
    element in row-major window order. ``window=None`` pools globally."""
    x = _wrap(x)
    if window is None:
        return global_max_pool(x)
    stride = stride or window
    win, ho, wo = _pool_windows(x.data, window, stride)
    flat = win.reshape(win.shape[:4] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape
    di, dj = np.divmod(arg, window)
    rows = di + (np.arange(ho) * stride)[None, None, :, None]
    cols = dj + (np.arange(wo) * stride)[None, None, None, :]

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        N, C = shape[:2]
        nn_, cc = np.meshgrid(np.arange(N), np.arange(C), indexing="ij")
        nn_ = np.broadcast_to(nn_[:, :, None, None], g.shape)
        cc = np.broadcast_to(cc[:, :, None, None], g.shape)
        np.add.at(gx, (nn_, cc, rows, cols), g)
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] mean."""
    return _wrap(x).mean(axis=(2, 3), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] max; first occurrence wins ties."""
    x = _wrap(x)
    N, C, H, W = x.shape
    return x.reshape(N, C, H * W).max(axis=2, keepdims=True).reshape(N, C, 1, 1)


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
    """Per-channel batch normalization for [N,C] or [N,C,H,W] inputs.

    In training mode the batch statistics (biased variance) normalize the input and
    the running buffers are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionMismatchError(f"gamma/beta shapes {gamma.shape}/{beta.shape} != ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    a = x.data
    if training:
        if a.shape[0] == 0:
            raise InvalidInputError("batch_norm in training mode needs a non-empty batch")
        mean = a.mean(axis=axes)
        var = a.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    count = a.size // C

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dxhat = g * g_
            dx = (inv.reshape(bshape) / count) * (
                count * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = g * g_ * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._make(out.astype(a.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")
