"""Convolution, bilinear sampling, softmax and quantisation ops."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_op


class ShapeError(ValueError):
    pass


def _check_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D [batch, channel, height, width] tensor, got shape {t.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (C*kh*kw, B*ho*wo); the innermost axis stays contiguous."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; cols is (C, kh, kw, B, ho, wo)."""
    out = np.zeros((shape[1], shape[0], shape[2], shape[3]), dtype=cols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, weight layout [Cout, Cin, kh, kw]."""
    _check_4d("conv2d input", x)
    _check_4d("conv2d weight", weight)
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channel dimension is {cin} but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias length {bias.shape} does not match output channels {cout}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    xp_shape = xp.shape

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        dw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(cin, kh, kw, b, ho, wo)
            dxp = _col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution, weight layout [Cin, Cout, kh, kw].

    Output size is (H - 1) * stride - 2 * padding + kh.
    """
    _check_4d("conv_transpose2d input", x)
    _check_4d("conv_transpose2d weight", weight)
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input channel dimension is {cin} but weight expects {wcin}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    wmat = weight.data.reshape(cin, -1)
    cols = (wmat.T @ xm).reshape(cout, kh, kw, b, h, w)
    full = _col2im(cols, (b, cout, hf, wf), kh, kw, stride, h, w)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gf = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gf, kh, kw, stride, h, w)
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((wmat @ gcols).reshape(cin, b, h, w).transpose(1, 0, 2, 3))
        dw = (xm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, inputs, backward)


def grid_sample_bilinear(source: Tensor, coords: Tensor) -> Tensor:
    """Bilinear lookup at absolute pixel positions with clamp-to-edge.

    ``coords`` is [B, 2, Ht, Wt] holding (x, y) in source pixel units. The
    gradient w.r.t. a clamped coordinate is zero.
    """
    _check_4d("grid_sample source", source)
    _check_4d("grid_sample coords", coords)
    b, c, hs, ws = source.shape
    if coords.shape[0] != b or coords.shape[1] != 2:
        raise ShapeError(f"grid_sample: coords must be [{b}, 2, Ht, Wt], got {coords.shape}")
    ht, wt = coords.shape[2:]
    n = ht * wt
    dtype = source.dtype
    cx = coords.data[:, 0].reshape(b, n)
    cy = coords.data[:, 1].reshape(b, n)
    x = np.clip(cx, 0, ws - 1)
    y = np.clip(cy, 0, hs - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    wx = (x - x0).astype(dtype)
    wy = (y - y0).astype(dtype)
    flat = source.data.reshape(b, c, hs * ws)

    def gather(yi, xi):
        idx = (yi * ws + xi)[:, None, :]
        return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, n)), axis=2)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wxb, wyb = wx[:, None, :], wy[:, None, :]
    top = v00 + wxb * (v01 - v00)
    bot = v10 + wxb * (v11 - v10)
    out = (top + wyb * (bot - top)).reshape(b, c, ht, wt)

    def backward(g):
        gf = g.reshape(b, c, n)
        dsrc = dcoords = None
        if source.requires_grad:
            corners = (
                (y0, x0, (1 - wx) * (1 - wy)),
                (y0, x1, wx * (1 - wy)),
                (y1, x0, (1 - wx) * wy),
                (y1, x1, wx * wy),
            )
            base = (np.arange(b * c, dtype=np.int64) * (hs * ws)).reshape(b, c, 1)
            idx = np.concatenate([np.broadcast_to(base + (yi * ws + xi)[:, None, :], (b, c, n)).ravel() for yi, xi, _ in corners])
            wts = np.concatenate([(gf * wk[:, None, :]).ravel() for _, _, wk in corners])
            dsrc = np.bincount(idx, weights=wts, minlength=b * c * hs * ws).astype(dtype).reshape(b, c, hs, ws)
        if coords.requires_grad:
            inside_x = ((cx >= 0) & (cx <= ws - 1)).astype(dtype)
            inside_y = ((cy >= 0) & (cy <= hs - 1)).astype(dtype)
            ddx = (gf * ((1 - wyb) * (v01 - v00) + wyb * (v11 - v10))).sum(axis=1) * inside_x
            ddy = (gf * (bot - top)).sum(axis=1) * inside_y
            dcoords = np.stack([ddx.reshape(b, ht, wt), ddy.reshape(b, ht, wt)], axis=1)
        return dsrc, dcoords

    return make_op(out, (source, coords), backward)


def softmax(logits: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (logits,), backward)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_hard(x: Tensor) -> Tensor:
    """Nearest integer, ties away from zero; no gradient reaches the producer."""
    return Tensor(round_half_away(x.data).astype(x.dtype))


def round_ste(x: Tensor) -> Tensor:
    """Nearest integer forward, identity backward."""
    return make_op(round_half_away(x.data).astype(x.dtype), (x,), lambda g: (g,))


def add_uniform_noise(x: Tensor, rng: np.random.Generator) -> Tensor:
    """x + u with u ~ U(-0.5, 0.5); identity gradient."""
    u = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
    return make_op(x.data + u, (x,), lambda g: (g,))


def pad_replicate(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Edge-replicate padding on the bottom/right of a [B, C, H, W] tensor."""
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")

    def backward(g):
        d = g[:, :, :h, :w].copy()
        if pad_h:
            d[:, :, h - 1, :] += g[:, :, h:, :w].sum(axis=2)
        if pad_w:
            d[:, :, :, w - 1] += g[:, :, :h, w:].sum(axis=3)
        if pad_h and pad_w:
            d[:, :, h - 1, w - 1] += g[:, :, h:, w:].sum(axis=(2, 3))
        return (d,)

    return make_op(out, (x,), backward)


def scalar(value: float, like: Tensor) -> Tensor:
    return as_tensor(np.asarray(value, dtype=like.dtype))
