"""Cross-scale prediction: transmitted flows and weight maps over a feature pyramid.

Every target location of the half-resolution predicted feature draws
``samples_per_scale`` bilinear samples from each of the three pyramid levels
(1/2, 1/4, 1/8 resolution). Sample offsets are in pixels of the level being
sampled; the base position at level ``s`` (0-based) is the target position
divided by ``2**s``. The ``3 * N`` samples of a head are blended with one
softmax taken jointly over (scale, sample).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import Tensor, grid_sample_bilinear, softmax, tsum
from .core.functional import ShapeError
from .nets import Conv, Module, MultiScaleExtractor

SCALES = 3


@dataclass
class SamplingField:
    """Decoded motion payload per head.

    flows: [B, heads, 3, N, 2, H, W] offsets (dx, dy) in source-level pixels.
    logits: [B, heads, 3, N, H, W] pre-softmax weights.
    """

    flows: Tensor
    logits: Tensor

    @property
    def heads(self) -> int:
        return self.flows.shape[1]

    @property
    def samples(self) -> int:
        return self.flows.shape[3]


def sampling_channels(heads: int, samples: int) -> int:
    return 9 * samples * heads


def split_sampling_info(info: Tensor, heads: int, samples: int) -> SamplingField:
    """Channel layout per head: 6N offsets (scale, sample, xy) then 3N logits (scale, sample)."""
    b, c, h, w = info.shape
    if c != sampling_channels(heads, samples):
        raise ShapeError(f"sampling info has {c} channels, expected {sampling_channels(heads, samples)}")
    per_head = info.reshape(b, heads, 9 * samples, h, w)
    flows = per_head[:, :, : 6 * samples].reshape(b, heads, SCALES, samples, 2, h, w)
    logits = per_head[:, :, 6 * samples :].reshape(b, heads, SCALES, samples, h, w)
    return SamplingField(flows, logits)


def project_sampling_info(m_t: Tensor, projection: Conv, heads: int, samples: int) -> SamplingField:
    """1x1 projection of the decoded motion feature into a :class:`SamplingField`."""
    return split_sampling_info(projection(m_t), heads, samples)


def sampling_weights(field: SamplingField, scale_mask: Sequence[float] | None = None) -> Tensor:
    """Softmax over the joint (scale, sample) axis per head.

    With ``scale_mask`` the weights of masked scales are zeroed and the rest
    renormalised, which keeps every location a convex combination.
    """
    b, heads, s, n, h, w = field.logits.shape
    weights = softmax(field.logits.reshape(b, heads, s * n, h, w), axis=2).reshape(b, heads, s, n, h, w)
    if scale_mask is not None:
        mask = Tensor(np.asarray(scale_mask, dtype=weights.dtype).reshape(1, 1, s, 1, 1, 1))
        masked = weights * mask
        total = tsum(tsum(masked, axis=3, keepdims=True), axis=2, keepdims=True)
        weights = masked / total
    return weights


def base_grid(h: int, w: int, level: int, repeats: int, dtype=np.float32) -> np.ndarray:
    """(2, repeats * h, w) base (x, y) positions of target pixels at a pyramid level."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = float(2**level)
    grid = np.stack([xs / f, ys / f]).astype(dtype)
    return np.tile(grid, (1, repeats, 1))


def cross_scale_warp(
    pyramid: Sequence[Tensor], field: SamplingField, scale_mask: Sequence[float] | None = None
) -> Tensor:
    """Weighted multi-scale sampling; returns [B, heads, C / heads, H, W].

    ``pyramid`` levels are already group-projected: channel block ``h`` of each
    level belongs to head ``h``.
    """
    b, heads, _, n, _, h, w = field.flows.shape
    if pyramid[0].shape[2:] != (h, w):
        raise ShapeError("finest pyramid level must match the sampling field resolution")
    weights = sampling_weights(field, scale_mask)
    out = None
    for s, level in enumerate(pyramid):
        _, c, hs, ws = level.shape
        cg = c // heads
        src = level.reshape(b * heads, cg, hs, ws)
        flow = field.flows[:, :, s].transpose(0, 1, 3, 2, 4, 5).reshape(b * heads, 2, n * h, w)
        coords = flow + Tensor(base_grid(h, w, s, n, dtype=flow.dtype))
        sampled = grid_sample_bilinear(src, coords).reshape(b, heads, cg, n, h, w)
        wts = weights[:, :, s].reshape(b, heads, 1, n, h, w)
        contrib = tsum(sampled * wts, axis=3)
        out = contrib if out is None else out + contrib
    return out


class PyramidExtractor(Module):
    """Reference feature pyramid plus the per-level 1x1 head-grouping projections."""

    def __init__(self, rng, c: int, bias: bool = True):
        self.extractor = MultiScaleExtractor(rng, c, bias=bias)
        self.group_proj = [Conv(rng, c, c, 1, bias=bias) for _ in range(SCALES)]

    def __call__(self, f_ref: Tensor) -> list[Tensor]:
        levels = self.extractor(f_ref)
        return [proj(level) for proj, level in zip(self.group_proj, levels)]


def predict_feature(
    m_t: Tensor,
    f_ref: Tensor,
    pyramid: PyramidExtractor,
    sampling_projection: Conv,
    output_projection: Conv,
    heads: int,
    samples: int,
    scale_mask: Sequence[float] | None = None,
) -> tuple[Tensor, SamplingField]:
    """Predicted feature F_bar_t (shape of ``f_ref``) and the field used."""
    levels = pyramid(f_ref)
    field = project_sampling_info(m_t, sampling_projection, heads, samples)
    per_head = cross_scale_warp(levels, field, scale_mask)
    b, _, cg, h, w = per_head.shape
    merged = per_head.reshape(b, heads * cg, h, w)
    return output_projection(merged), field


def total_weight_maps(field: SamplingField) -> np.ndarray:
    """[B, 3, H, W]: weights summed over samples and heads per scale (sum = heads)."""
    w = sampling_weights(field).data
    return w.sum(axis=(1, 3))


def dominant_flows(field: SamplingField) -> np.ndarray:
    """[B, 3, 2, H, W]: per scale, the flow of the highest-weight (head, sample)."""
    w = sampling_weights(field).data
    fl = field.flows.data
    b, heads, s, n, h, wd = w.shape
    out = np.zeros((b, s, 2, h, wd), dtype=fl.dtype)
    for si in range(s):
        ws = w[:, :, si].reshape(b, heads * n, h, wd)
        best = ws.argmax(axis=1)
        fs = fl[:, :, si].reshape(b, heads * n, 2, h, wd)
        idx = best[:, None, None, :, :]
        out[:, si] = np.take_along_axis(fs, np.broadcast_to(idx, (b, 1, 2, h, wd)), axis=1)[:, 0]
    return out


__all__ = [
    "SCALES",
    "PyramidExtractor",
    "SamplingField",
    "base_grid",
    "cross_scale_warp",
    "dominant_flows",
    "predict_feature",
    "project_sampling_info",
    "sampling_channels",
    "sampling_weights",
    "split_sampling_info",
    "total_weight_maps",
]
