"""Structured differentiable ops: convolution, resampling, normalization.

Convolutions are computed as cross-correlations (no kernel flip) through
im2col plus one BLAS matmul, which is the fastest portable path for the
sizes used here.  Bilinear resampling is written in lerp form
``a + f*(b - a)`` so that identity resizes and constant grids come out
exactly, not just approximately.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .grid import Grid, as_grid, make_op

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "resize_bilinear",
    "bilinear_sample",
    "layer_norm",
]


def _conv_geometry(n_in: int, k: int, stride: int, padding: int, what: str) -> int:
    span = n_in + 2 * padding - k
    if span < 0:
        raise ConfigurationError(
            f"conv2d: kernel {k} larger than padded input {n_in + 2 * padding} along {what}"
        )
    if span % stride != 0:
        raise ConfigurationError(
            f"conv2d: ({n_in} + 2*{padding} - {k}) not divisible by stride {stride} along {what}"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view (B, C, Ho, Wo, kh, kw) over the padded input."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Grid:
    """2D cross-correlation.

    x      : Grid (B, C_in, H, W)
    weight : Grid (C_out, C_in, kh, kw)
    bias   : Grid (C_out,) or None
    Output height is (H + 2*padding - kh)/stride + 1 and must be exact.
    """
    x, weight = as_grid(x), as_grid(weight)
    bias = as_grid(bias) if bias is not None else None
    if x.values.ndim != 4:
        raise DimensionError(f"conv2d: input must have 4 axes (B,C,H,W), got {x.shape}")
    if weight.values.ndim != 4:
        raise DimensionError(f"conv2d: weight must have 4 axes, got {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d: input channel axis {cin} does not match weight channel axis {cin_w}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} must be ({cout},)")
    ho = _conv_geometry(h, kh, stride, padding, "height")
    wo = _conv_geometry(w, kw, stride, padding, "width")

    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    win = _windows(xp, kh, kw, stride, ho, wo)
    # (B, Ho, Wo, C_in*kh*kw) @ (C_in*kh*kw, C_out)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.values.reshape(cout, cin * kh * kw).T
    out2 = cols @ wmat
    if bias is not None:
        out2 = out2 + bias.values
    values = out2.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    values = np.ascontiguousarray(values)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = g2 @ wmat.T
        gwin = gcols.reshape(b, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[..., i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, g2.sum(axis=0)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(values, parents, backward)


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Grid:
    """Per-channel 2D cross-correlation (one kernel per channel).

    weight : Grid (C, kh, kw); bias : Grid (C,) or None.
    """
    x, weight = as_grid(x), as_grid(weight)
    bias = as_grid(bias) if bias is not None else None
    if x.values.ndim != 4 or weight.values.ndim != 3:
        raise DimensionError(
            f"depthwise_conv2d: need input (B,C,H,W) and weight (C,kh,kw), got {x.shape} / {weight.shape}"
        )
    b, c, h, w = x.shape
    cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"depthwise_conv2d: channel axis {c} != weight channel axis {cw}")
    ho = _conv_geometry(h, kh, stride, padding, "height")
    wo = _conv_geometry(w, kw, stride, padding, "width")

    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    win = _windows(xp, kh, kw, stride, ho, wo)
    values = np.einsum("bchwij,cij->bchw", win, weight.values, optimize=True)
    if bias is not None:
        values = values + bias.values[None, :, None, None]
    values = np.ascontiguousarray(values)

    def backward(g):
        gw = np.einsum("bchw,bchwij->cij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    g * weight.values[None, :, i, j, None, None]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(values, parents, backward)


def _resize_axis(n_out: int, n_in: int, dtype):
    """Source coordinates for align-corners-false resizing with edge clamp."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    frac = (src - i0f).astype(dtype)
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, frac


def resize_bilinear(x, out_h: int, out_w: int) -> Grid:
    """Bilinear resize of the two trailing axes, align-corners-false.

    Same-size calls return a bitwise copy.  The lerp arrangement keeps
    constant grids exactly constant under any scale factor.
    """
    x = as_grid(x)
    if x.values.ndim != 4:
        raise DimensionError(f"resize_bilinear: input must have 4 axes, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize_bilinear: output size {out_h}x{out_w} must be positive")
    b, c, h, w = x.shape

    if (out_h, out_w) == (h, w):
        values = x.values.copy()

        def backward_id(g):
            return [(x, g)]

        return make_op(values, (x,), backward_id)

    y0, y1, fy = _resize_axis(out_h, h, x.values.dtype)
    x0, x1, fx = _resize_axis(out_w, w, x.values.dtype)
    v = x.values
    a = v[:, :, y0][:, :, :, x0]
    bb = v[:, :, y0][:, :, :, x1]
    cc = v[:, :, y1][:, :, :, x0]
    d = v[:, :, y1][:, :, :, x1]
    fxr = fx[None, None, None, :]
    fyr = fy[None, None, :, None]
    top = a + fxr * (bb - a)
    bot = cc + fxr * (d - cc)
    values = top + fyr * (bot - top)

    def backward(g):
        gtop = g * (1.0 - fyr)
        gbot = g * fyr
        parts = (
            (gtop * (1.0 - fxr), y0, x0),
            (gtop * fxr, y0, x1),
            (gbot * (1.0 - fxr), y1, x0),
            (gbot * fxr, y1, x1),
        )
        gx = np.zeros_like(v)
        gflat = gx.reshape(b, c, h * w)
        for part, yi, xi in parts:
            idx = (yi[:, None] * w + xi[None, :]).ravel()
            contrib = part.reshape(b, c, out_h * out_w)
            np.add.at(gflat, (slice(None), slice(None), idx), contrib)
        return [(x, gx)]

    return make_op(np.ascontiguousarray(values), (x,), backward)


def bilinear_sample(x, col_coords: np.ndarray, row_coords: np.ndarray) -> Grid:
    """Sample x at continuous pixel coordinates; outside cells read as zero.

    col_coords/row_coords are constant float maps of the output shape
    (H', W') giving, for every output cell, the source column/row in the
    pixel coordinates of x.  Gradients flow to x only.
    """
    x = as_grid(x)
    if x.values.ndim != 4:
        raise DimensionError(f"bilinear_sample: input must have 4 axes, got {x.shape}")
    rows = np.asarray(row_coords, dtype=np.float64)
    cols = np.asarray(col_coords, dtype=np.float64)
    if rows.shape != cols.shape or rows.ndim != 2:
        raise DimensionError(
            f"bilinear_sample: coordinate maps must share a 2D shape, got {rows.shape} / {cols.shape}"
        )
    b, c, h, w = x.shape
    oh, ow = rows.shape

    r0f = np.floor(rows)
    c0f = np.floor(cols)
    fr = (rows - r0f).astype(x.values.dtype)
    fc = (cols - c0f).astype(x.values.dtype)
    r0, c0 = r0f.astype(np.intp), c0f.astype(np.intp)
    r1, c1 = r0 + 1, c0 + 1

    corners = []
    for ri, ci, wgt in (
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c1, (1.0 - fr) * fc),
        (r1, c0, fr * (1.0 - fc)),
        (r1, c1, fr * fc),
    ):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        rc = np.clip(ri, 0, h - 1)
        cclip = np.clip(ci, 0, w - 1)
        corners.append((rc, cclip, np.where(valid, wgt, 0.0).astype(x.values.dtype)))

    v = x.values
    values = np.zeros((b, c, oh, ow), dtype=v.dtype)
    for rc, cclip, wgt in corners:
        values += v[:, :, rc, cclip] * wgt[None, None]

    def backward(g):
        gx = np.zeros_like(v)
        gflat = gx.reshape(b, c, h * w)
        for rc, cclip, wgt in corners:
            idx = (rc * w + cclip).ravel()
            contrib = (g * wgt[None, None]).reshape(b, c, oh * ow)
            np.add.at(gflat, (slice(None), slice(None), idx), contrib)
        return [(x, gx)]

    return make_op(values, (x,), backward)


def layer_norm(x, eps: float = 1e-5) -> Grid:
    """Normalize across the channel axis independently at every position.

    Produces zero mean and unit variance per (batch, h, w) position; any
    learned scale/shift is applied by the caller with broadcast mul/add.
    """
    x = as_grid(x)
    if x.values.ndim != 4:
        raise DimensionError(f"layer_norm: input must have 4 axes, got {x.shape}")
    v = x.values
    mu = v.mean(axis=1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=v.dtype))
    values = (centered * inv).astype(v.dtype)

    def backward(g):
        n = v.shape[1]
        gmean = g.mean(axis=1, keepdims=True)
        gy = (g * values).mean(axis=1, keepdims=True)
        gx = inv * (g - gmean - values * gy)
        return [(x, gx)]

    return make_op(values, (x,), backward)
