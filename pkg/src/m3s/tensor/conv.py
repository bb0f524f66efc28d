"""Batched 2-D convolution and the spatial resampling ops built on it.

conv2d lowers each input window into a matrix (im2col) and runs a single
GEMM per group; the backward pass scatters through the same indexing with
strided adds (col2im).  Output extent per spatial axis follows
floor((n + 2p - d*(k-1) - 1)/s) + 1, and must be positive.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Tensor, _record, as_tensor


def conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            dilation: int) -> tuple[np.ndarray, int, int]:
    """(B,C,H,W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(w, kw, stride, pad, dilation)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv window (k=({kh},{kw}), s={stride}, p={pad}, d={dilation}) "
            f"does not fit input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    shaped = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(shaped).reshape(b, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(gcols: np.ndarray, in_shape: tuple, kh: int, kw: int, stride: int,
            pad: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    b, c, h, w = in_shape
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    g = gcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            gx[:, :, hi:hi + stride * oh:stride, wj:wj + stride * ow:stride] += g[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin/groups,kh,kw).

    ``groups == Cin == Cout`` gives a depthwise convolution.  Bias, when
    present, has shape (Cout,) and is added per output channel.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g} input channels per group, input supplies {cin // groups}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad, dilation)
    wmat = weight.data.reshape(cout, cin_g * kh * kw)
    if groups == 1:
        out = wmat @ cols
    else:
        cpg_in = cin_g * kh * kw
        cpg_out = cout // groups
        cols_g = cols.reshape(b, groups, cpg_in, oh * ow)
        w_g = wmat.reshape(groups, cpg_out, cpg_in)
        out = np.einsum("goc,bgcn->bgon", w_g, cols_g, optimize=True)
        out = out.reshape(b, cout, oh * ow)
    out = out.reshape(b, cout, oh, ow)

    inputs: tuple = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = (x, weight, bias)

    in_shape = x.shape

    def bwd(g):
        gmat = g.reshape(b, cout, oh * ow)
        if groups == 1:
            # (cout, ckk) from sum_b g_b @ cols_b^T
            gw = np.einsum("bon,bcn->oc", gmat, cols, optimize=True)
            gcols = wmat.T @ gmat
        else:
            cpg_in = cin_g * kh * kw
            cpg_out = cout // groups
            gmat_g = gmat.reshape(b, groups, cpg_out, oh * ow)
            cols_g = cols.reshape(b, groups, cpg_in, oh * ow)
            w_g = wmat.reshape(groups, cpg_out, cpg_in)
            gw = np.einsum("bgon,bgcn->goc", gmat_g, cols_g, optimize=True)
            gw = gw.reshape(cout, cpg_in)
            gcols = np.einsum("goc,bgon->bgcn", w_g, gmat_g, optimize=True)
            gcols = gcols.reshape(b, groups * cpg_in, oh * ow)
        gx = _col2im(gcols, in_shape, kh, kw, stride, pad, dilation, oh, ow)
        gweight = gw.reshape(cout, cin_g, kh, kw)
        if len(inputs) == 3:
            gb = gmat.sum(axis=(0, 2))
            return gx, gweight, gb
        return gx, gweight

    return _record(out, inputs, bwd)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    oh, ow = h // k, w // k
    blocks = x.data.reshape(b, c, oh, k, ow, k)
    out = blocks.mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) * scale
        return (gx,)

    return _record(out, (x,), bwd)


def global_avg_pool(x) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None, None], (b, c, h, w)) * scale
        return (gx,)

    return _record(out, (x,), bwd)


def _linear_taps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and weights for doubling one axis of length n.

    Output sample o reads from continuous coordinate (o + 0.5)/2 - 0.5,
    clamped to the valid range (half-pixel-center convention).
    """
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def upsample2x_bilinear(x) -> Tensor:
    """Double both spatial dims by separable linear interpolation."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x_bilinear expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    r0, r1, wr0, wr1 = _linear_taps(h)
    c0, c1, wc0, wc1 = _linear_taps(w)
    xd = x.data
    rows = xd[:, :, r0, :] * wr0[None, None, :, None] \
        + xd[:, :, r1, :] * wr1[None, None, :, None]
    out = rows[:, :, :, c0] * wc0[None, None, None, :] \
        + rows[:, :, :, c1] * wc1[None, None, None, :]

    def bwd(g):
        grows = np.zeros((b, c, 2 * h, w))
        np.add.at(grows, (slice(None), slice(None), slice(None), c0),
                  g * wc0[None, None, None, :])
        np.add.at(grows, (slice(None), slice(None), slice(None), c1),
                  g * wc1[None, None, None, :])
        gx = np.zeros((b, c, h, w))
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)),
                  grows * wr0[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)),
                  grows * wr1[None, None, :, None])
        return (gx,)

    return _record(out, (x,), bwd)


__all__ = [
    "conv2d", "conv_out_size", "avg_pool2d", "global_avg_pool",
    "upsample2x_bilinear",
]

