"""Seeded synthetic clips with known motion and ground-truth disocclusion masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..codec import Frame
from ..core import generator

KINDS = ("translate", "fast_translate", "occluder")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "translate"
    magnitude: tuple[int, int] = (2, 0)
    size: tuple[int, int] = (64, 64)
    frames: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; choose from {KINDS}")
        if self.frames < 1 or min(self.size) < 1:
            raise ValueError("frames and size must be positive")


@dataclass
class SyntheticClip:
    frames: list[Frame]
    # per frame: pixels with no co-located or displaced source in the previous frame
    disoccluded: list[np.ndarray]


def texture(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """(3, H, W) float texture in [0, 1]: multi-scale smoothed noise plus colour gradients."""
    img = np.zeros((3, height, width))
    for sigma, amp in ((8.0, 0.6), (3.0, 0.3), (1.2, 0.1)):
        n = rng.standard_normal((3, height, width))
        n = np.stack([gaussian_filter(c, sigma, mode="wrap") for c in n])
        img += amp * n / (n.std() + 1e-12)
    ys, xs = np.mgrid[0:height, 0:width]
    grads = rng.uniform(-1, 1, (3, 2))
    img += grads[:, 0, None, None] * xs / max(width, 1) + grads[:, 1, None, None] * ys / max(height, 1)
    img -= img.min()
    return img / max(img.max(), 1e-12)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _shift_edge(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """out(x, y) = img(clamp(x - dx), clamp(y - dy)): content moves by (dx, dy)."""
    _, h, w = img.shape
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    return img[:, ys][:, :, xs]


def gen_synthetic(spec: SyntheticSpec) -> SyntheticClip:
    w, h = spec.size
    rng = generator(spec.seed, KINDS.index(spec.kind))
    base = _to_u8(texture(rng, w, h))
    dx, dy = spec.magnitude
    empty = np.zeros((h, w), dtype=bool)
    if spec.kind in ("translate", "fast_translate"):
        frames = [Frame(w, h, _shift_edge(base, dx * t, dy * t)) for t in range(spec.frames)]
        return SyntheticClip(frames, [empty.copy() for _ in frames])

    # occluder: static background, an opaque textured rectangle moving by (dx, dy) per frame
    rw, rh = max(2, w // 3), max(2, h // 3)
    patch = _to_u8(texture(rng, rw, rh) * 0.5 + 0.5 * rng.uniform(0, 1, (3, 1, 1)))
    x0 = int(rng.integers(0, max(1, w - rw)))
    y0 = int(rng.integers(0, max(1, h - rh)))
    frames, masks, covered_prev = [], [], None
    for t in range(spec.frames):
        img = base.copy()
        covered = np.zeros((h, w), dtype=bool)
        ox, oy = x0 + dx * t, y0 + dy * t
        xa, xb = max(ox, 0), min(ox + rw, w)
        ya, yb = max(oy, 0), min(oy + rh, h)
        if xa < xb and ya < yb:
            img[:, ya:yb, xa:xb] = patch[:, ya - oy : yb - oy, xa - ox : xb - ox]
            covered[ya:yb, xa:xb] = True
        frames.append(Frame(w, h, img))
        # background revealed now that was hidden in the previous frame
        masks.append(empty.copy() if covered_prev is None else covered_prev & ~covered)
        covered_prev = covered
    return SyntheticClip(frames, masks)


def suite(kinds: tuple[str, ...], count: int, seed: int, size=(64, 64), frames: int = 5) -> list[SyntheticClip]:
    """``count`` clips cycling through ``kinds`` with per-clip seeds and motion."""
    rng = generator(seed, 99)
    clips = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        speed = 2 if kind == "translate" else 6 if kind == "fast_translate" else 4
        angle = rng.uniform(0, 2 * np.pi)
        mag = (int(round(speed * np.cos(angle))), int(round(speed * np.sin(angle))))
        clips.append(gen_synthetic(SyntheticSpec(kind, mag, size, frames, int(rng.integers(0, 2**31)))))
    return clips


__all__ = ["KINDS", "SyntheticClip", "SyntheticSpec", "gen_synthetic", "suite", "texture"]
