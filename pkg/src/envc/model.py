"""Latent coders and the I/P-frame models.

Encoding always reconstructs through the same routines the decoder runs, on
the same integer symbols, so the two sides agree bit for bit.
"""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import (
    LEAKY_SLOPE,
    Tensor,
    concat,
    generator,
    grid_sample_bilinear,
    leaky_relu,
    mse,
    no_grad,
    round_half_away,
)
from .entropy.models import (
    GMM_COMPONENTS,
    FactorizedPrior,
    MaskedConv,
    PointwiseStack,
    QuantMode,
    bits_from_likelihood,
    gaussian_likelihood,
    gaussian_tables,
    gmm_likelihood,
    gmm_tables,
    quantize,
    scale_from_raw,
    scale_from_raw_np,
)
from .entropy.rangecoder import RangeDecoder, RangeEncoder
from .nets import (
    PARAM_GROUPS,
    Analysis,
    Conv,
    FeatureExtractor,
    FinalUpsampler,
    HyperAnalysis,
    HyperSynthesis,
    Module,
    NetConfig,
    ResBlocks,
    Synthesis,
)
from .prediction import PyramidExtractor, SamplingField, predict_feature, sampling_channels


class ChunkError(ValueError):
    pass


def pack_subchunks(parts: Sequence[bytes]) -> bytes:
    return b"".join(struct.pack("<I", len(p)) + p for p in parts)


def unpack_subchunks(payload: bytes, count: int) -> list[bytes]:
    parts, pos = [], 0
    for _ in range(count):
        if pos + 4 > len(payload):
            raise ChunkError("sub-chunk length prefix truncated")
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise ChunkError("sub-chunk body truncated")
        parts.append(payload[pos : pos + n])
        pos += n
    if pos != len(payload):
        raise ChunkError("unexpected bytes after sub-chunks")
    return parts


def _run_symbols(coder, tables: Sequence, values: np.ndarray | None = None) -> np.ndarray:
    """Encode ``values`` (when given) or decode ``len(tables)`` symbols, one table each."""
    if values is None:
        return np.asarray([coder.decode(t) for t in tables], dtype=np.int64)
    for v, t in zip(values.tolist(), tables):
        coder.encode(v, t)
    return values


def _factorized_pass(coder, prior: FactorizedPrior, shape, values=None) -> np.ndarray:
    """Channel-major coding under a per-channel factorized prior."""
    c, h, w = shape
    per_channel = prior.tables()
    tables = [per_channel[ci] for ci in range(c) for _ in range(h * w)]
    flat = None if values is None else values.reshape(-1)
    return _run_symbols(coder, tables, flat).reshape(c, h, w)


def _raster_pass(coder, shape, context: MaskedConv, tables_at, values=None) -> np.ndarray:
    """Raster-order coding where each position's tables depend on already-coded
    neighbours through ``context``. Encoder and decoder share this routine, so
    both see identical contexts."""
    m, h, w = shape
    r = context.k // 2
    buf = np.zeros((m, h + 2 * r, w + 2 * r), dtype=np.float32)
    out = np.empty((m, h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            tables = tables_at(context.at(buf, i, j), i, j)
            col = _run_symbols(coder, tables, None if values is None else values[:, i, j])
            out[:, i, j] = col
            buf[:, i + r, j + r] = col
    return out


def _lrelu_np(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, x * np.float32(LEAKY_SLOPE)).astype(x.dtype)


def _symbols(t: Tensor) -> np.ndarray:
    return round_half_away(t.data[0]).astype(np.int64)


def _as_input(sym: np.ndarray) -> Tensor:
    return Tensor(sym[None].astype(np.float32))


@dataclass
class LatentResult:
    out: Tensor
    bits: Tensor
    latent: Tensor


@dataclass
class CodedLatent:
    """Coded chunk payload plus the encoder-side decoded output."""

    payload: bytes
    out: Tensor
    estimated_bits: float

    @property
    def bits(self) -> int:
        return 8 * len(self.payload)


# --- hyperprior coder (I-frame and residual) ----------------------------------

class HyperSide(Module):
    """Entropy-decoder side: hyper synthesis, hyper-latent prior, optional context."""

    def __init__(self, rng, n: int, m: int, ar: bool):
        self.synth = HyperSynthesis(rng, n, m)
        self.prior = FactorizedPrior(n)
        if ar:
            self.context = MaskedConv(rng, m, 2 * m)
            self.entropy_params = PointwiseStack(rng, [4 * m, 3 * m, 2 * m])


class HyperpriorCoder(Module):
    """Autoencoder whose latent is coded under a Gaussian conditioned on a hyper-latent
    (and, with ``ar``, on a masked spatial context)."""

    def __init__(self, rng, cin: int, cout: int, n: int, m: int, depth: int, ar: bool):
        self.g_a = Analysis(rng, cin, n, m, depth)
        self.g_s = Synthesis(rng, m, n, cout, depth)
        self.h_a = HyperAnalysis(rng, m, n)
        self.h_s = HyperSide(rng, n, m, ar)
        self.m, self.n, self.ar, self.depth = m, n, ar, depth

    def _gaussian_params(self, hyper: Tensor, y_q: Tensor) -> tuple[Tensor, Tensor]:
        if self.ar:
            e = self.h_s.entropy_params(concat([hyper, self.h_s.context(y_q)], axis=1))
        else:
            e = hyper
        m = self.m
        return e[:, :m], scale_from_raw(e[:, m:])

    def forward(self, x: Tensor, mode: QuantMode, rng=None) -> LatentResult:
        y = self.g_a(x)
        z = self.h_a(y)
        z_q = quantize(z, mode, rng)
        bits = bits_from_likelihood(self.h_s.prior.likelihood(z_q))
        y_q = quantize(y, mode, rng)
        mu, sigma = self._gaussian_params(self.h_s.synth(z_q), y_q)
        bits = bits + bits_from_likelihood(gaussian_likelihood(y_q, mu, sigma))
        return LatentResult(self.g_s(y_q), bits, y_q)

    def latent_shapes(self, h: int, w: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """Main and hyper latent shapes for an input of spatial size h x w."""
        f = 2**self.depth
        return (self.m, h // f, w // f), (self.n, h // (4 * f), w // (4 * f))

    def _main_pass(self, coder, hyper: np.ndarray, values=None) -> np.ndarray:
        m = self.m
        shape = (m,) + hyper.shape[1:]
        if not self.ar:
            tables = gaussian_tables(hyper[:m].reshape(-1), scale_from_raw_np(hyper[m:]).reshape(-1))
            flat = None if values is None else values.reshape(-1)
            return _run_symbols(coder, tables, flat).reshape(shape)

        def tables_at(ctx, i, j):
            e = self.h_s.entropy_params.at(np.concatenate([hyper[:, i, j], ctx]))
            return gaussian_tables(e[:m], scale_from_raw_np(e[m:]))

        return _raster_pass(coder, shape, self.h_s.context, tables_at, values)

    def compress(self, x: Tensor) -> CodedLatent:
        if x.shape[0] != 1:
            raise ValueError("coding works on one frame at a time")
        with no_grad():
            y = self.g_a(x)
            z_sym = _symbols(self.h_a(y))
            y_sym = _symbols(y)
            enc_h = RangeEncoder()
            _factorized_pass(enc_h, self.h_s.prior, z_sym.shape, z_sym)
            hyper = self.h_s.synth(_as_input(z_sym)).data[0]
            enc_m = RangeEncoder()
            self._main_pass(enc_m, hyper, y_sym)
            payload = pack_subchunks([enc_h.finish(), enc_m.finish()])
            out = self.g_s(_as_input(y_sym))
        return CodedLatent(payload, out, enc_h.ideal_bits + enc_m.ideal_bits)

    def decompress(self, payload: bytes, h: int, w: int) -> Tensor:
        hyper_bytes, main_bytes = unpack_subchunks(payload, 2)
        _, z_shape = self.latent_shapes(h, w)
        with no_grad():
            dec_h = RangeDecoder(hyper_bytes)
            z_sym = _factorized_pass(dec_h, self.h_s.prior, z_shape)
            dec_h.finish()
            hyper = self.h_s.synth(_as_input(z_sym)).data[0]
            dec_m = RangeDecoder(main_bytes)
            y_sym = self._main_pass(dec_m, hyper)
            dec_m.finish()
            return self.g_s(_as_input(y_sym))


# --- motion coder ------------------------------------------------------------

class MotionSynthesisSide(Module):
    """Motion decoder plus its entropy model (factorized, or masked-context GMM)."""

    def __init__(self, rng, m: int, n: int, cout: int, depth: int, ar: bool):
        self.synth = Synthesis(rng, m, n, cout, depth)
        if ar:
            self.context = MaskedConv(rng, m, 2 * m)
            self.gmm = PointwiseStack(rng, [2 * m, 2 * m, 3 * GMM_COMPONENTS * m])
        else:
            self.prior = FactorizedPrior(m)


class MotionCoder(Module):
    """Motion autoencoder without a hyper branch."""

    def __init__(self, rng, cin: int, cout: int, n: int, m: int, depth: int, ar: bool):
        self.g_a = Analysis(rng, cin, n, m, depth)
        self.g_s = MotionSynthesisSide(rng, m, n, cout, depth, ar)
        self.m, self.ar, self.depth = m, ar, depth

    def _gmm_params(self, y_q: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        b, m, h, w = y_q.shape
        e = self.g_s.gmm(leaky_relu(self.g_s.context(y_q))).reshape(b, 3, GMM_COMPONENTS, m, h, w)
        return e[:, 0], e[:, 1], scale_from_raw(e[:, 2])

    def forward(self, x: Tensor, mode: QuantMode, rng=None) -> LatentResult:
        y = self.g_a(x)
        y_q = quantize(y, mode, rng)
        if self.ar:
            p = gmm_likelihood(y_q, *self._gmm_params(y_q))
        else:
            p = self.g_s.prior.likelihood(y_q)
        return LatentResult(self.g_s.synth(y_q), bits_from_likelihood(p), y_q)

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = 2**self.depth
        return (self.m, h // f, w // f)

    def _pass(self, coder, shape, values=None) -> np.ndarray:
        if not self.ar:
            return _factorized_pass(coder, self.g_s.prior, shape, values)
        m = self.m

        def tables_at(ctx, i, j):
            e = self.g_s.gmm.at(_lrelu_np(ctx)).reshape(3, GMM_COMPONENTS, m)
            return gmm_tables(e[0].T, e[1].T, scale_from_raw_np(e[2]).T)

        return _raster_pass(coder, shape, self.g_s.context, tables_at, values)

    def compress(self, x: Tensor) -> CodedLatent:
        if x.shape[0] != 1:
            raise ValueError("coding works on one frame at a time")
        with no_grad():
            y_sym = _symbols(self.g_a(x))
            enc = RangeEncoder()
            self._pass(enc, y_sym.shape, y_sym)
            payload = pack_subchunks([enc.finish()])
            out = self.g_s.synth(_as_input(y_sym))
        return CodedLatent(payload, out, enc.ideal_bits)

    def decompress(self, payload: bytes, h: int, w: int) -> Tensor:
        (main,) = unpack_subchunks(payload, 1)
        with no_grad():
            dec = RangeDecoder(main)
            y_sym = self._pass(dec, self.latent_shape(h, w))
            dec.finish()
            return self.g_s.synth(_as_input(y_sym))


# --- full models -------------------------------------------------------------

@dataclass
class FrameResult:
    x_hat: Tensor
    bits_motion: Tensor | float
    bits_residual: Tensor | float
    field: SamplingField | None = None

    @property
    def bits(self):
        return self.bits_motion + self.bits_residual


class AlignBlocks(Module):
    """Separate resblocks units for the current and the predicted feature."""

    def __init__(self, rng, c: int):
        self.current = ResBlocks(rng, c)
        self.predicted = ResBlocks(rng, c)


def _zero_rate(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


class BaseCodecModel(Module):
    kind = "base"

    def group_of(self, name: str) -> str:
        for g in PARAM_GROUPS:
            if name == g or name.startswith(g + "."):
                return g
        raise KeyError(f"parameter {name} belongs to no group")

    def groups(self) -> dict[str, list[Tensor]]:
        out: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            out.setdefault(self.group_of(name), []).append(p)
        return out

    def set_frozen(self, frozen: Sequence[str]) -> None:
        frozen = set(frozen)
        unknown = frozen - set(PARAM_GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) not in frozen

    def iframe_forward(self, x: Tensor, mode: QuantMode, rng=None) -> FrameResult:
        r = self.i_frame.forward(x, mode, rng)
        return FrameResult(r.out, _zero_rate(r.bits), r.bits)


class ENVCModel(BaseCodecModel):
    """I-frame hyperprior codec plus the cross-scale-prediction P-frame codec."""

    kind = "cross_scale"

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        rng = generator(seed, 1)
        c = cfg.feature_channels
        self.i_frame = HyperpriorCoder(rng, 3, 3, cfg.n_channels, cfg.m_channels, 4, cfg.ar)
        self.feature_extractor = FeatureExtractor(rng, c)
        self.motion = MotionCoder(rng, 2 * c, cfg.motion_n, cfg.motion_n, cfg.motion_m, 3, cfg.ar)
        self.multi_scale_extractor = PyramidExtractor(rng, c)
        self.sampling_projection = Conv(
            rng, cfg.motion_n, sampling_channels(cfg.heads, cfg.samples_per_scale), 1, zero=True
        )
        self.output_projection = Conv(rng, c, c, 1)
        self.align_blocks = AlignBlocks(rng, c)
        self.residual = HyperpriorCoder(rng, c, c, cfg.n_channels, cfg.m_channels, 3, cfg.ar)
        self.final_upsampler = FinalUpsampler(rng, c)

    def predict(self, m_t: Tensor, f_ref: Tensor, scale_mask=None) -> tuple[Tensor, SamplingField]:
        cfg = self.cfg
        return predict_feature(
            m_t,
            f_ref,
            self.multi_scale_extractor,
            self.sampling_projection,
            self.output_projection,
            cfg.heads,
            cfg.samples_per_scale,
            scale_mask,
        )

    def pframe_forward(
        self,
        x: Tensor,
        ref: Tensor,
        motion_mode: QuantMode,
        residual_mode: QuantMode,
        rng=None,
        scale_mask=None,
    ) -> FrameResult:
        f_cur = self.feature_extractor(x)
        f_ref = self.feature_extractor(ref)
        mot = self.motion.forward(concat([f_cur, f_ref], axis=1), motion_mode, rng)
        f_bar, field = self.predict(mot.out, f_ref, scale_mask)
        aligned_pred = self.align_blocks.predicted(f_bar)
        r = self.align_blocks.current(f_cur) - aligned_pred
        res = self.residual.forward(r, residual_mode, rng)
        x_hat = self.final_upsampler(aligned_pred + res.out)
        return FrameResult(x_hat, mot.bits, res.bits, field)

    # coding ---------------------------------------------------------------
    def _reconstruct(self, m_t: Tensor, r_hat: Tensor, ref: Tensor) -> Tensor:
        f_ref = self.feature_extractor(ref)
        f_bar, _ = self.predict(m_t, f_ref)
        return self.final_upsampler(self.align_blocks.predicted(f_bar) + r_hat)

    def encode_pframe(self, x: Tensor, ref: Tensor) -> tuple[CodedLatent, CodedLatent, Tensor]:
        with no_grad():
            f_cur = self.feature_extractor(x)
            f_ref = self.feature_extractor(ref)
            mot = self.motion.compress(concat([f_cur, f_ref], axis=1))
            f_bar, _ = self.predict(mot.out, f_ref)
            r = self.align_blocks.current(f_cur) - self.align_blocks.predicted(f_bar)
            res = self.residual.compress(r)
            x_hat = self._reconstruct(mot.out, res.out, ref)
        return mot, res, x_hat

    def decode_motion(self, payload: bytes, h: int, w: int) -> Tensor:
        return self.motion.decompress(payload, h // 2, w // 2)

    def decode_residual(self, payload: bytes, h: int, w: int) -> Tensor:
        return self.residual.decompress(payload, h // 2, w // 2)

    def decode_pframe(self, motion_payload: bytes, residual_payload: bytes, ref: Tensor) -> Tensor:
        h, w = ref.shape[2:]
        with no_grad():
            m_t = self.decode_motion(motion_payload, h, w)
            r_hat = self.decode_residual(residual_payload, h, w)
            return self._reconstruct(m_t, r_hat, ref)

    def prediction_only(self, x: Tensor, ref: Tensor, scale_mask=None) -> tuple[Tensor, SamplingField]:
        """Frame synthesised with the feature residual set to zero (hard-quantised motion)."""
        with no_grad():
            f_cur = self.feature_extractor(x)
            f_ref = self.feature_extractor(ref)
            mot = self.motion.forward(concat([f_cur, f_ref], axis=1), QuantMode.ROUND)
            f_bar, field = self.predict(mot.out, f_ref, scale_mask)
            return self.final_upsampler(self.align_blocks.predicted(f_bar)), field


class PixelLevelModel(BaseCodecModel):
    """Ablation arm: full-resolution 2-D flow, pixel warp, pixel residual, no refinement."""

    kind = "pixel_level"

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        rng = generator(seed, 1)
        self.i_frame = HyperpriorCoder(rng, 3, 3, cfg.n_channels, cfg.m_channels, 4, cfg.ar)
        self.motion = MotionCoder(rng, 6, 2, cfg.motion_n, cfg.motion_m, 4, cfg.ar)
        self.residual = HyperpriorCoder(rng, 3, 3, cfg.n_channels, cfg.m_channels, 4, cfg.ar)
        # start from zero flow
        last = self.motion.g_s.synth.ups[-1]
        last.weight.data[...] = 0.0

    @staticmethod
    def warp(ref: Tensor, flow: Tensor) -> Tensor:
        b, _, h, w = ref.shape
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        base = Tensor(np.stack([xs, ys]).astype(flow.dtype)[None])
        return grid_sample_bilinear(ref, flow + base)

    def pframe_forward(self, x, ref, motion_mode, residual_mode, rng=None, scale_mask=None) -> FrameResult:
        mot = self.motion.forward(concat([x, ref], axis=1), motion_mode, rng)
        pred = self.warp(ref, mot.out)
        res = self.residual.forward(x - pred, residual_mode, rng)
        return FrameResult(pred + res.out, mot.bits, res.bits, None)

    def encode_pframe(self, x: Tensor, ref: Tensor):
        with no_grad():
            mot = self.motion.compress(concat([x, ref], axis=1))
            pred = self.warp(ref, mot.out)
            res = self.residual.compress(x - pred)
            x_hat = self.warp(ref, mot.out) + res.out
        return mot, res, x_hat

    def decode_motion(self, payload: bytes, h: int, w: int) -> Tensor:
        return self.motion.decompress(payload, h, w)

    def decode_residual(self, payload: bytes, h: int, w: int) -> Tensor:
        return self.residual.decompress(payload, h, w)

    def decode_pframe(self, motion_payload: bytes, residual_payload: bytes, ref: Tensor) -> Tensor:
        h, w = ref.shape[2:]
        with no_grad():
            flow = self.decode_motion(motion_payload, h, w)
            r_hat = self.decode_residual(residual_payload, h, w)
            return self.warp(ref, flow) + r_hat


def build_model(kind: str, cfg: NetConfig, seed: int = 0) -> BaseCodecModel:
    if kind == "cross_scale":
        return ENVCModel(cfg, seed)
    if kind == "pixel_level":
        return PixelLevelModel(cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def distortion(x_hat: Tensor, x: Tensor) -> Tensor:
    return mse(x_hat, x)


__all__ = [
    "BaseCodecModel",
    "ChunkError",
    "CodedLatent",
    "ENVCModel",
    "FrameResult",
    "HyperpriorCoder",
    "MotionCoder",
    "PixelLevelModel",
    "build_model",
    "distortion",
    "pack_subchunks",
    "unpack_subchunks",
]
