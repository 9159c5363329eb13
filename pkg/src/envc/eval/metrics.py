"""PSNR and multi-scale SSIM on 8-bit RGB frames."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
_K1, _K2 = 0.01, 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def window_size(h: int, w: int) -> int:
    """Largest odd window not exceeding SSIM_WINDOW or the image size."""
    size = min(SSIM_WINDOW, h, w)
    return size if size % 2 else size - 1


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of (..., H, W) with the odd 1-D window g."""
    r = g.size // 2
    out = correlate1d(img, g, axis=-1, mode="constant")
    out = correlate1d(out, g, axis=-2, mode="constant")
    h, w = img.shape[-2:]
    return out[..., r : h - r, r : w - r]


def _ssim_terms(x: np.ndarray, y: np.ndarray, peak: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean SSIM and mean contrast-structure term."""
    g = gaussian_window(window_size(*x.shape[-2:]))
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).mean(axis=(-2, -1)), cs.mean(axis=(-2, -1))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    x = x[..., : h - h % 2, : w - w % 2]
    return 0.25 * (x[..., ::2, ::2] + x[..., 1::2, ::2] + x[..., ::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, peak: float = 255.0, weights: Sequence[float] = MSSSIM_WEIGHTS) -> float:
    """MS-SSIM of (C, H, W) images, averaged over channels.

    Negative per-scale terms are clamped at zero before exponentiation.
    """
    x = np.asarray(a, np.float64)
    y = np.asarray(b, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    w = np.asarray(weights, np.float64)
    levels = len(w)
    if min(x.shape[-2:]) < 2 ** (levels - 1):
        raise ValueError(f"images must be at least {2 ** (levels - 1)} pixels per side")
    result = np.ones(x.shape[0])
    for i in range(levels):
        ssim_val, cs = _ssim_terms(x, y, peak)
        if i < levels - 1:
            result *= np.maximum(cs, 0.0) ** w[i]
            x, y = _avg_pool2(x), _avg_pool2(y)
        else:
            result *= np.maximum(ssim_val, 0.0) ** w[i]
    return float(result.mean())


@dataclass
class RDPoint:
    bpp: float
    psnr_db: float
    msssim: float


@dataclass
class FrameQuality:
    index: int
    psnr_db: float
    msssim: float


def compute_metrics(ref: Sequence, dec: Sequence) -> tuple[list[FrameQuality], FrameQuality]:
    """Per-frame quality and the mean (index -1). Frames expose ``rgb``."""
    if len(ref) != len(dec):
        raise ValueError(f"frame counts differ: {len(ref)} vs {len(dec)}")
    rows = []
    for i, (r, d) in enumerate(zip(ref, dec)):
        if r.rgb.shape != d.rgb.shape:
            raise ValueError(f"frame {i}: dims differ {r.rgb.shape} vs {d.rgb.shape}")
        rows.append(FrameQuality(i, psnr(r.rgb, d.rgb), ms_ssim(r.rgb, d.rgb)))
    mean = FrameQuality(
        -1,
        float(np.mean([q.psnr_db for q in rows])),
        float(np.mean([q.msssim for q in rows])),
    )
    return rows, mean


__all__ = [
    "MSSSIM_WEIGHTS",
    "PSNR_CAP",
    "FrameQuality",
    "RDPoint",
    "compute_metrics",
    "gaussian_window",
    "window_size",
    "ms_ssim",
    "psnr",
]
