"""Building blocks: conv layers, resblock units, autoencoder transforms."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, asdict

import numpy as np

from .core import LEAKY_SLOPE, Parameter, Tensor, conv2d, conv_transpose2d, leaky_relu
from .core.functional import ShapeError

# Freeze-mask vocabulary: every parameter name starts with exactly one of these.
PARAM_GROUPS = (
    "i_frame.g_a",
    "i_frame.g_s",
    "i_frame.h_a",
    "i_frame.h_s",
    "motion.g_a",
    "motion.g_s",
    "residual.g_a",
    "residual.g_s",
    "residual.h_a",
    "residual.h_s",
    "feature_extractor",
    "multi_scale_extractor",
    "sampling_projection",
    "output_projection",
    "align_blocks",
    "final_upsampler",
)

RESBLOCKS_PER_UNIT = 3


@dataclass(frozen=True)
class NetConfig:
    """Channel widths and prediction-module shape.

    ``n_channels``/``m_channels`` size the I-frame and residual autoencoders,
    ``motion_n``/``motion_m`` the motion autoencoder. ``feature_channels`` is
    the width of F_t and of every pyramid level.
    """

    n_channels: int = 32
    m_channels: int = 48
    motion_n: int = 16
    motion_m: int = 24
    feature_channels: int = 32
    heads: int = 4
    samples_per_scale: int = 4
    scales: int = 3
    ar: bool = False

    def __post_init__(self):
        if not (self.m_channels > self.n_channels > 0):
            raise ValueError("need m_channels > n_channels > 0")
        if not (self.motion_m > self.motion_n > 0):
            raise ValueError("need motion_m > motion_n > 0")
        if self.heads < 1 or self.samples_per_scale < 1:
            raise ValueError("heads and samples_per_scale must be >= 1")
        if self.scales != 3:
            raise ValueError("the prediction pyramid has exactly 3 scales")
        if self.feature_channels % self.heads:
            raise ValueError("feature_channels must be divisible by heads")

    @classmethod
    def preset(cls, name: str, **overrides) -> NetConfig:
        presets = {
            "paper": dict(n_channels=128, m_channels=160, motion_n=64, motion_m=80, feature_channels=64),
            "desk": dict(n_channels=32, m_channels=48, motion_n=16, motion_m=24, feature_channels=32),
            "toy": dict(n_channels=12, m_channels=16, motion_n=8, motion_m=12, feature_channels=16, samples_per_scale=2),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform init; unit gain keeps activations variance-preserving
    through the long linear down/up chains."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Parameter container with dotted names, in registration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def new_param(data: np.ndarray) -> Parameter:
    return Parameter(np.asarray(data, dtype=np.float32), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True, zero: bool = False):
        self.stride = stride
        self.padding = k // 2
        w = np.zeros((cout, cin, k, k), np.float32) if zero else he_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.weight = new_param(w)
        self.bias = new_param(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvT(Module):
    """4x4 stride-2 transposed conv: exact 2x upsampling."""

    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        self.weight = new_param(he_uniform(rng, (cin, cout, 4, 4), cin * 4))
        self.bias = new_param(np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=2, padding=1)


class ResBlock(Module):
    """x + conv(act(conv(x))); the second conv starts at zero so the block is identity."""

    def __init__(self, rng, channels: int, bias: bool = True):
        self.conv1 = Conv(rng, channels, channels, 3, bias=bias)
        self.conv2 = Conv(rng, channels, channels, 3, bias=bias, zero=True)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(leaky_relu(self.conv1(x), LEAKY_SLOPE))


class ResBlocks(Module):
    """One unit of three stacked resblocks."""

    def __init__(self, rng, channels: int, bias: bool = True):
        self.blocks = [ResBlock(rng, channels, bias) for _ in range(RESBLOCKS_PER_UNIT)]
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"resblocks: expected {self.channels} channels, got {x.shape[1]}")
        for blk in self.blocks:
            x = blk(x)
        return x


class Analysis(Module):
    """Stride-2 conv encoder: ``depth`` halvings, resblocks after all but the last."""

    def __init__(self, rng, cin: int, n: int, m: int, depth: int):
        if depth not in (3, 4):
            raise ValueError("depth must be 3 or 4")
        self.depth = depth
        chans = [cin] + [n] * (depth - 1) + [m]
        self.downs = [Conv(rng, chans[i], chans[i + 1], 3, stride=2) for i in range(depth)]
        self.units = [ResBlocks(rng, n) for _ in range(depth - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        f = 2**self.depth
        if h % f or w % f:
            raise ShapeError(f"encoder input {h}x{w} is not divisible by {f}")
        for i, down in enumerate(self.downs):
            x = down(x)
            if i < len(self.units):
                x = self.units[i](x)
        return x


class Synthesis(Module):
    """Mirror of :class:`Analysis` with 4x4 stride-2 transposed convs."""

    def __init__(self, rng, m: int, n: int, cout: int, depth: int):
        if depth not in (3, 4):
            raise ValueError("depth must be 3 or 4")
        chans = [m] + [n] * (depth - 1) + [cout]
        self.ups = [ConvT(rng, chans[i], chans[i + 1]) for i in range(depth)]
        self.units = [ResBlocks(rng, n) for _ in range(depth - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, up in enumerate(self.ups):
            x = up(x)
            if i < len(self.units):
                x = self.units[i](x)
        return x


class HyperAnalysis(Module):
    def __init__(self, rng, m: int, n: int):
        self.c1 = Conv(rng, m, n, 3)
        self.c2 = Conv(rng, n, n, 3, stride=2)
        self.c3 = Conv(rng, n, n, 3, stride=2)

    def __call__(self, y: Tensor) -> Tensor:
        x = leaky_relu(self.c1(y))
        x = leaky_relu(self.c2(x))
        return self.c3(x)


class HyperSynthesis(Module):
    """Maps the hyper-latent to per-element (mean, raw scale) maps, 2*m channels."""

    def __init__(self, rng, n: int, m: int):
        self.u1 = ConvT(rng, n, n)
        self.u2 = ConvT(rng, n, n)
        self.c3 = Conv(rng, n, 2 * m, 3)

    def __call__(self, z: Tensor) -> Tensor:
        x = leaky_relu(self.u1(z))
        x = leaky_relu(self.u2(x))
        return self.c3(x)


class FeatureExtractor(Module):
    """X_t -> F_t: one stride-2 conv then a resblocks unit (H/2 x W/2)."""

    def __init__(self, rng, c: int):
        self.down = Conv(rng, 3, c, 3, stride=2)
        self.unit = ResBlocks(rng, c)

    def __call__(self, x: Tensor) -> Tensor:
        return self.unit(self.down(x))


class FinalUpsampler(Module):
    """F_hat_t -> X_hat_t: resblocks unit then a 2x transposed conv to RGB."""

    def __init__(self, rng, c: int):
        self.unit = ResBlocks(rng, c)
        self.up = ConvT(rng, c, 3)

    def __call__(self, f: Tensor) -> Tensor:
        return self.up(self.unit(f))


class MultiScaleExtractor(Module):
    """Reference feature pyramid: L1 is the input itself, L2/L3 by two downsampling stages."""

    def __init__(self, rng, c: int, bias: bool = True):
        self.down2 = Conv(rng, c, c, 3, stride=2, bias=bias)
        self.unit2 = ResBlocks(rng, c, bias=bias)
        self.down3 = Conv(rng, c, c, 3, stride=2, bias=bias)
        self.unit3 = ResBlocks(rng, c, bias=bias)

    def __call__(self, f_ref: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h, w = f_ref.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"multi-scale extractor input {h}x{w} must be divisible by 4")
        l2 = self.unit2(self.down2(f_ref))
        l3 = self.unit3(self.down3(l2))
        return f_ref, l2, l3
