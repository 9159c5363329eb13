"""Quantisation modes and learned probability models for integer latents."""

from __future__ import annotations

import enum

import numpy as np
from scipy.special import ndtr

from ..core import (
    Tensor,
    absolute,
    add_uniform_noise,
    bmm,
    concat,
    conv2d,
    leaky_relu,
    log2,
    lower_bound,
    normal_cdf,
    round_hard,
    round_ste,
    sigmoid,
    softmax,
    softplus,
    tanh,
    tsum,
)
from ..nets import Conv, Module, new_param
from .rangecoder import PmfTable, tables_from_pmfs

SIGMA_MIN = 0.04
P_MIN = 2.0**-15
SUPPORT_LO = -64
SUPPORT_HI = 63
GMM_COMPONENTS = 3

_SUPPORT = np.arange(SUPPORT_LO, SUPPORT_HI + 1, dtype=np.float64)


class QuantMode(enum.Enum):
    AUN = "aun"
    ROUND = "round"
    STE = "ste"


def quantize(x: Tensor, mode: QuantMode, rng: np.random.Generator | None = None) -> Tensor:
    if mode is QuantMode.AUN:
        if rng is None:
            raise ValueError("AUN quantisation needs a random generator")
        return add_uniform_noise(x, rng)
    if mode is QuantMode.ROUND:
        return round_hard(x)
    if mode is QuantMode.STE:
        return round_ste(x)
    raise ValueError(mode)


def bits_from_likelihood(p: Tensor) -> Tensor:
    """Sum of -log2 p with p floored at P_MIN."""
    return -tsum(log2(lower_bound(p, P_MIN)))


def _with_escape(pmf: np.ndarray) -> np.ndarray:
    tail = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
    return np.concatenate([pmf, tail], axis=1)


# --- factorized ----------------------------------------------------------

class FactorizedPrior(Module):
    """Per-channel monotone CDF network with non-negative (softplus) matrices."""

    FILTERS = (1, 3, 3, 3, 1)

    def __init__(self, channels: int, init_scale: float = 10.0):
        self.channels = channels
        f = self.FILTERS
        scale = init_scale ** (1.0 / (len(f) - 1))
        rng = np.random.default_rng(channels)
        self.matrices = []
        self.biases = []
        self.factors = []
        for k in range(len(f) - 1):
            init = np.log(np.expm1(1.0 / scale / f[k + 1]))
            self.matrices.append(new_param(np.full((channels, f[k + 1], f[k]), init)))
            self.biases.append(new_param(rng.uniform(-0.5, 0.5, (channels, f[k + 1], 1))))
            if k < len(f) - 2:
                self.factors.append(new_param(np.zeros((channels, f[k + 1], 1))))

    def named_parameters(self, prefix: str = ""):
        for name, group in (("matrices", self.matrices), ("biases", self.biases), ("factors", self.factors)):
            for i, p in enumerate(group):
                yield f"{prefix}{name}.{i}", p

    def logits(self, x: Tensor) -> Tensor:
        """x is (C, 1, L); returns cumulative logits of the same shape."""
        n = len(self.matrices)
        for k in range(n):
            x = bmm(softplus(self.matrices[k]), x) + self.biases[k]
            if k < n - 1:
                x = x + tanh(self.factors[k]) * tanh(x)
        return x

    def likelihood(self, v: Tensor) -> Tensor:
        b, c, h, w = v.shape
        flat = v.transpose(1, 0, 2, 3).reshape(c, 1, b * h * w)
        both = self.logits(concat([flat - 0.5, flat + 0.5], axis=2))
        lower = both[:, :, : b * h * w]
        upper = both[:, :, b * h * w :]
        sign = Tensor(-np.sign(lower.data + upper.data), dtype=v.dtype)
        p = absolute(sigmoid(sign * upper) - sigmoid(sign * lower))
        return p.reshape(c, b, h, w).transpose(1, 0, 2, 3)

    def _channel_logits(self, sel: slice, x: np.ndarray) -> np.ndarray:
        n = len(self.matrices)
        for k in range(n):
            m = np.logaddexp(0, self.matrices[k].data[sel].astype(np.float64))
            x = np.matmul(m, x) + self.biases[k].data[sel]
            if k < n - 1:
                x = x + np.tanh(self.factors[k].data[sel].astype(np.float64)) * np.tanh(x)
        return x

    def cdf(self, channel: int, x: np.ndarray) -> np.ndarray:
        """Cumulative distribution of one channel at real positions ``x``."""
        x = np.asarray(x, dtype=np.float64)
        logits = self._channel_logits(slice(channel, channel + 1), x.reshape(1, 1, -1))
        return _sigmoid(logits).reshape(x.shape)

    def pmf(self) -> np.ndarray:
        """(C, K + 1) probabilities over the table support plus escape mass."""
        c = self.channels
        x = np.broadcast_to(_SUPPORT, (c, 1, _SUPPORT.size))
        lower = self._channel_logits(slice(None), x - 0.5)
        upper = self._channel_logits(slice(None), x + 0.5)
        sign = -np.sign(lower + upper)
        p = np.abs(_sigmoid(sign * upper) - _sigmoid(sign * lower)).reshape(c, -1)
        return _with_escape(p)

    def tables(self) -> list[PmfTable]:
        return tables_from_pmfs(self.pmf(), SUPPORT_LO)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- Gaussian / GMM --------------------------------------------------------

def scale_from_raw(raw: Tensor) -> Tensor:
    return lower_bound(softplus(raw), SIGMA_MIN)


def scale_from_raw_np(raw: np.ndarray) -> np.ndarray:
    return np.maximum(np.logaddexp(0, raw.astype(np.float64)), SIGMA_MIN)


def gaussian_likelihood(v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """P(v) for a unit-width bin under N(mu, sigma), evaluated on the upper tail side."""
    values = absolute(v - mu)
    upper = normal_cdf((0.5 - values) / sigma)
    lower = normal_cdf((-0.5 - values) / sigma)
    return upper - lower


def gaussian_pmf(mu: np.ndarray, sigma: np.ndarray, values: np.ndarray = _SUPPORT) -> np.ndarray:
    """(n, len(values)) bin probabilities; mu and sigma are flat (n,)."""
    mu = np.asarray(mu, np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, np.float64).reshape(-1, 1)
    d = np.abs(values[None, :] - mu)
    return ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray) -> list[PmfTable]:
    return tables_from_pmfs(_with_escape(gaussian_pmf(mu, sigma)), SUPPORT_LO)


def gmm_likelihood(v: Tensor, logits: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Mixture over axis 1 of (B, K, C, H, W) parameters; v is (B, C, H, W)."""
    b, c, h, w = v.shape
    weights = softmax(logits, axis=1)
    comp = gaussian_likelihood(v.reshape(b, 1, c, h, w), mu, sigma)
    return tsum(weights * comp, axis=1)


def gmm_pmf(logits: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Parameters shaped (n, K); returns (n, K_support) probabilities."""
    logits = np.asarray(logits, np.float64)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    n, k = w.shape
    comp = gaussian_pmf(mu.reshape(-1), sigma.reshape(-1)).reshape(n, k, -1)
    return (w[:, :, None] * comp).sum(axis=1)


def gmm_tables(logits: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> list[PmfTable]:
    return tables_from_pmfs(_with_escape(gmm_pmf(logits, mu, sigma)), SUPPORT_LO)


# --- masked context ----------------------------------------------------------

class MaskedConv(Module):
    """5x5 causal convolution: the centre and all later raster positions are masked."""

    def __init__(self, rng, cin: int, cout: int, k: int = 5):
        self.conv = Conv(rng, cin, cout, k)
        mask = np.ones((cout, cin, k, k), np.float32)
        mask[:, :, k // 2, k // 2 :] = 0
        mask[:, :, k // 2 + 1 :, :] = 0
        self.mask = mask
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.conv.weight * Tensor(self.mask), self.conv.bias, 1, self.k // 2)

    def at(self, padded: np.ndarray, i: int, j: int) -> np.ndarray:
        """Context vector at (i, j) from a (C, H + k - 1, W + k - 1) padded buffer."""
        k = self.k
        w = (self.conv.weight.data * self.mask).reshape(self.mask.shape[0], -1)
        patch = padded[:, i : i + k, j : j + k].reshape(-1)
        return w @ patch + self.conv.bias.data


class PointwiseStack(Module):
    """1x1 conv layers with leaky-ReLU between them."""

    def __init__(self, rng, widths: list[int]):
        self.layers = [Conv(rng, widths[i], widths[i + 1], 1) for i in range(len(widths) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x)
        return x

    def at(self, vec: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            w = layer.weight.data.reshape(layer.weight.shape[0], -1)
            vec = w @ vec + layer.bias.data
            if i < len(self.layers) - 1:
                vec = np.where(vec > 0, vec, vec * np.float32(0.1)).astype(vec.dtype)
        return vec


def discretized_likelihood(v: Tensor, model: str, **context) -> Tensor:
    """Bin probabilities of integer (or soft) ``v`` under one of the model kinds.

    ``model`` is ``"factorized"`` (context: ``prior``), ``"hyperprior_gaussian"``
    (context: ``mu``, ``sigma``) or ``"ar_gmm"`` (context: ``logits``, ``mu``,
    ``sigma`` with a component axis at position 1).
    """
    if model == "factorized":
        p = context["prior"].likelihood(v)
    elif model == "hyperprior_gaussian":
        p = gaussian_likelihood(v, context["mu"], context["sigma"])
    elif model == "ar_gmm":
        p = gmm_likelihood(v, context["logits"], context["mu"], context["sigma"])
    else:
        raise ValueError(f"unknown entropy model {model!r}")
    return lower_bound(p, P_MIN)


def estimate_rate(v: Tensor, model: str, **context) -> Tensor:
    """Estimated code length in bits (differentiable)."""
    return bits_from_likelihood(discretized_likelihood(v, model, **context))


__all__ = [
    "GMM_COMPONENTS",
    "P_MIN",
    "SIGMA_MIN",
    "SUPPORT_HI",
    "SUPPORT_LO",
    "FactorizedPrior",
    "MaskedConv",
    "PointwiseStack",
    "QuantMode",
    "bits_from_likelihood",
    "discretized_likelihood",
    "estimate_rate",
    "gaussian_likelihood",
    "gaussian_pmf",
    "gaussian_tables",
    "gmm_likelihood",
    "gmm_pmf",
    "gmm_tables",
    "quantize",
    "scale_from_raw",
    "scale_from_raw_np",
]
