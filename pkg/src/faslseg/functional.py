"""Differentiable kernels used by the network blocks.

All kernels operate on NCHW feature maps unless stated otherwise and follow
the deep-learning conventions: convolution is cross-correlation, bilinear
resampling uses half-pixel centres with edge clamping.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, is_grad_enabled, record

# Largest score matrix (elements) materialized at once by graph-free attention.
_ATTN_CHUNK_ELEMS = 1 << 24

_MAC_COUNTER: list[int] | None = None


class count_macs:
    """Context manager tallying multiply-accumulates of matmul/conv kernels."""

    def __enter__(self):
        global _MAC_COUNTER
        self._prev = _MAC_COUNTER
        _MAC_COUNTER = [0]
        self.total = 0
        return self

    def __exit__(self, *exc):
        global _MAC_COUNTER
        self.total = _MAC_COUNTER[0]
        _MAC_COUNTER = self._prev
        return False


def _tally(n: int) -> None:
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += int(n)


# -- dense algebra -------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight`` (+ bias) with ``weight`` stored as (in, out)."""
    _tally(np.prod(x.shape[:-1]) * weight.shape[0] * weight.shape[1])
    out = x @ weight
    return out + bias if bias is not None else out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if C != Cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if kh != kw:
        raise DimensionError(f"conv2d needs square kernels, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractError(f"invalid stride={stride} / padding={padding}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape} and kernel {k}")
    _tally(B * Ho * Wo * Cout * Cin * k * k)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w = weight.data
    if k == 1:
        cols = xp[:, :, : stride * Ho : stride, : stride * Wo : stride]
        out = np.tensordot(w[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        if k == 1:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            gcols = np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            gxp = np.zeros_like(xp)
            gxp[:, :, : stride * Ho : stride, : stride * Wo : stride] = gcols
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, w, axes=([1], [0]))  # B,Ho,Wo,C,k,k
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, parents, bw)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1
) -> Tensor:
    """Transposed convolution; ``weight`` is stored as (Cin, Cout, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    B, C, H, W = x.shape
    Cin, Cout, k, _ = weight.shape
    if C != Cin:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv_transpose2d output would be empty for input {x.shape}")
    _tally(B * H * W * Cin * Cout * k * k)
    w = weight.data
    cols = np.tensordot(x.data, w, axes=([1], [0]))  # B,H,W,Cout,k,k
    full = np.zeros((B, Cout, Hf, Wf), dtype=np.result_type(x.data, w))
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * H : stride, j : j + stride * W : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    out = np.ascontiguousarray(full[:, :, padding : padding + Ho, padding : padding + Wo])
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = np.empty((B, H, W, Cout, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gcols[:, :, :, :, i, j] = gfull[:, :, i : i + stride * H : stride, j : j + stride * W : stride].transpose(
                    0, 2, 3, 1
                )
        gx = np.tensordot(gcols, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 1, 2]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, parents, bw)


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return record((xd * cdf).astype(xd.dtype), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw)


# -- normalization ------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an NCHW map.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as the running estimate).
    """
    xd = x.data
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        n = None
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (
                inv_std.reshape(shape)
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mean) * inv_std
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        gx = inv_std / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), bw)


# -- resampling and layout ------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) matrix of 1-D bilinear weights.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the two trailing axes to (out_h, out_w)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if (out_h, out_w) == (H, W):
        return x
    ah = bilinear_matrix(H, out_h, x.dtype)
    aw = bilinear_matrix(W, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record(out, (x,), bw)


def interpolate_bilinear(x: Tensor, scale: int) -> Tensor:
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise ContractError(f"scale must be an integer >= 1, got {scale!r}")
    H, W = x.shape[-2:]
    return resize_bilinear(x, H * scale, W * scale)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW maps along the channel axis, preserving list order."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ContractError("concat_channels needs at least one input")
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: input {i} has shape {t.shape}, expected batch/spatial of {ref}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record(np.concatenate([t.data for t in xs], axis=1), tuple(xs), bw)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0, *sizes])
    if bounds[-1] != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    return [x[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes))]


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    B, N, C = t.shape
    return t.transpose(0, 2, 1).reshape(B, C, h, w)


# -- attention -------------------------------------------------------------------


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head over token tensors (B, N, C).

    Column block ``i`` of the channel axis (width C/heads) belongs to head ``i``;
    head outputs are concatenated back in the same order.
    """
    B, Nq, C = q.shape
    Nk = k.shape[1]
    if C % heads:
        raise DimensionError(f"width {C} not divisible by {heads} heads")
    dk = C // heads
    scale = 1.0 / math.sqrt(dk)
    _tally(2 * B * heads * Nq * Nk * dk)

    if not is_grad_enabled() and B * heads * Nq * Nk > _ATTN_CHUNK_ELEMS:
        return Tensor(_chunked_attention(q.data, k.data, v.data, heads, scale))

    qh = q.reshape(B, Nq, heads, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Nk, heads, dk).transpose(0, 2, 3, 1)
    vh = v.reshape(B, Nk, heads, dk).transpose(0, 2, 1, 3)
    attn = softmax((qh @ kh) * scale, axis=-1)
    out = attn @ vh
    return out.transpose(0, 2, 1, 3).reshape(B, Nq, C)


def _chunked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, scale: float) -> np.ndarray:
    B, Nq, C = q.shape
    Nk = k.shape[1]
    dk = C // heads
    qh = q.reshape(B, Nq, heads, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Nk, heads, dk).transpose(0, 2, 3, 1)
    vh = v.reshape(B, Nk, heads, dk).transpose(0, 2, 1, 3)
    out = np.empty((B, heads, Nq, dk), dtype=q.dtype)
    step = max(1, _ATTN_CHUNK_ELEMS // (B * heads * Nk))
    for s in range(0, Nq, step):
        scores = np.matmul(qh[:, :, s : s + step], kh) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[:, :, s : s + step] = np.matmul(scores, vh)
    return out.transpose(0, 2, 1, 3).reshape(B, Nq, C)
