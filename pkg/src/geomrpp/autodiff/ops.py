"""Differentiable operators used by the encoder and the graph layers."""
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import kinks
from .tensor import Tensor, as_tensor

LOG2 = math.log(2.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    kinks.report(np.abs(x.data))
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: x.accumulate(g * mask))


def ssp(x: Tensor) -> Tensor:
    """Shifted softplus ``log(0.5 * exp(x) + 0.5)``."""
    out = np.logaddexp(0.0, x.data) - LOG2
    return Tensor.from_op(out, (x,), lambda g: x.accumulate(g * expit(x.data)))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    w = weight

    def back(g: np.ndarray) -> None:
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        if bias is not None:
            bias.accumulate(g.sum(axis=0))

    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor.from_op(out, parents, back)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N * Ho * Wo, C * kh * kw) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = _im2col(_pad(x.data, padding), kh, kw, stride)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        weight.accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # input gradient = full correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dx = _im2col(gp, kh, kw, 1) @ wf.T
            x.accumulate(np.ascontiguousarray(dx.reshape(n, h, w, c).transpose(0, 3, 1, 2)))
        elif x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x.accumulate(dxp[:, :, padding:padding + h, padding:padding + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, back)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd trailing rows/cols are dropped.
    Gradient goes to the first maximal element of each window."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than window {size}")
    xc = x.data[:, :, :ho * size, :wo * size]
    win = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if kinks.active():
        srt = np.sort(win, axis=-1)
        # all-zero windows come from clamped ReLUs and stay flat under perturbation
        kinks.report((srt[..., -1] - srt[..., -2])[srt[..., -1] != 0.0])

    def back(g: np.ndarray) -> None:
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gw.reshape(n, c, ho, wo, size, size) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        x.accumulate(gx)

    return Tensor.from_op(out, (x,), back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
                running_mean: Optional[np.ndarray], running_var: Optional[np.ndarray],
                momentum: float = 0.1, eps: float = 1e-5
                ) -> Tuple[Tensor, Optional[np.ndarray], Optional[np.ndarray]]:
    """Per-channel normalization of an (N, C, H, W) tensor.

    Returns the output and the (possibly updated) running statistics. Running
    variance uses the unbiased batch estimate.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is None:
            running_mean, running_var = np.zeros(c), np.ones(c)
        unbiased = var * m / max(m - 1, 1)
        running_mean = (1 - momentum) * running_mean + momentum * mean
        running_var = (1 - momentum) * running_var + momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batchnorm2d: eval mode before running statistics were initialized")
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g: np.ndarray) -> None:
        gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta.accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if training:
            dx = (gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True))
            x.accumulate(dx * inv[None, :, None, None])
        else:
            x.accumulate(gx * inv[None, :, None, None])

    return Tensor.from_op(out, (x, gamma, beta), back), running_mean, running_var


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), labels])

    def back(g: np.ndarray) -> None:
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(g * p / n)

    return Tensor.from_op(np.asarray(loss), (logits,), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def back(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        x.accumulate(gx)

    return Tensor.from_op(x.data[index], (x,), back)


def segment_sum(x: Tensor, index: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets; empty buckets are zero."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_segments,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, index, x.data)
    return Tensor.from_op(out, (x,), lambda g: x.accumulate(g[index]))


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g: np.ndarray) -> None:
        for p, a, b in zip(parts, sizes[:-1], sizes[1:]):
            p.accumulate(g[a:b])

    return Tensor.from_op(np.concatenate([p.data for p in parts]), parts, back)
