"""GoP encoder/decoder, bitstream layout, RVF clips and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LEAKY_SLOPE, Tensor, pad_replicate
from .entropy.rangecoder import CorruptStreamError
from .model import BaseCodecModel, ChunkError, build_model
from .nets import NetConfig

LAMBDAS_MSE = (512, 1024, 2048, 3072, 4096)
LAMBDAS_MSSSIM = (6, 14, 24, 36, 50)

MAGIC = b"ENVC"
VERSION = 1
FLAG_AR = 0x01
FLAG_PIXEL_LEVEL = 0x02
_HEADER = struct.Struct("<4sBBHHBIBQ")
_MAX_DIM = 65535


# --- errors --------------------------------------------------------------------

class BitstreamError(ValueError):
    """Decoding failure; ``code`` is stable and distinct per failure kind."""

    code = 10


class BadMagicError(BitstreamError):
    code = 11


class VersionError(BitstreamError):
    code = 12


class CheckpointMismatchError(BitstreamError):
    code = 13


class TruncatedStreamError(BitstreamError):
    code = 14


class CorruptChunkError(BitstreamError):
    code = 15


class CheckpointError(ValueError):
    code = 5


# --- frames --------------------------------------------------------------------

@dataclass
class Frame:
    """Planar 8-bit RGB frame, ``rgb`` shaped (3, height, width)."""

    width: int
    height: int
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.rgb.shape != (3, self.height, self.width):
            raise ValueError(f"frame samples {self.rgb.shape} do not match 3x{self.height}x{self.width}")

    @classmethod
    def from_array(cls, rgb: np.ndarray) -> Frame:
        rgb = np.asarray(rgb)
        return cls(rgb.shape[2], rgb.shape[1], rgb)


def frame_to_tensor(frame: Frame) -> Tensor:
    return Tensor((frame.rgb.astype(np.float32) / np.float32(255.0))[None])


def tensor_to_frame(x: Tensor | np.ndarray, width: int, height: int) -> Frame:
    data = x.data if isinstance(x, Tensor) else x
    rgb = np.clip(np.rint(data[0, :, :height, :width] * 255.0), 0, 255).astype(np.uint8)
    return Frame(width, height, rgb)


def padded_size(width: int, height: int, multiple: int = 64) -> tuple[int, int]:
    return -(-width // multiple) * multiple, -(-height // multiple) * multiple


def pad_frame(x: Tensor, multiple: int = 64) -> Tensor:
    h, w = x.shape[2:]
    pw, ph = padded_size(w, h, multiple)
    return pad_replicate(x, ph - h, pw - w)


def as_reference(x_hat: Tensor) -> Tensor:
    """The P-chain reference: decoded frame clipped to the valid sample range."""
    return Tensor(np.clip(x_hat.data, 0.0, 1.0))


# --- RVF -----------------------------------------------------------------------

def write_rvf(path: str | Path, frames: list[Frame]) -> None:
    if not frames:
        raise ValueError("an RVF clip needs at least one frame")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as f:
        f.write(f"RVF1 {w} {h} {len(frames)}\n".encode("ascii"))
        for fr in frames:
            if (fr.width, fr.height) != (w, h):
                raise ValueError("all RVF frames must share one size")
            f.write(fr.rgb.tobytes())


def read_rvf(path: str | Path) -> list[Frame]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    parts = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(parts) != 4 or parts[0] != "RVF1":
        raise ValueError(f"{path}: not an RVF1 file")
    w, h, t = (int(v) for v in parts[1:])
    body = data[nl + 1 :]
    n = 3 * w * h
    if len(body) != n * t:
        raise ValueError(f"{path}: expected {n * t} sample bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(t, 3, h, w)
    return [Frame(w, h, arr[i].copy()) for i in range(t)]


# --- configuration ---------------------------------------------------------------

@dataclass
class CodecConfig:
    net: NetConfig = field(default_factory=NetConfig)
    gop_size: int = 12
    lambda_index: int = 1
    pad_multiple: int = 64
    metric: str = "mse"

    def __post_init__(self):
        if self.gop_size < 1 or self.gop_size > 255:
            raise ValueError("gop_size must be in [1, 255]")
        if not 0 <= self.lambda_index < len(LAMBDAS_MSE):
            raise ValueError(f"lambda_index must be in [0, {len(LAMBDAS_MSE) - 1}]")
        if self.metric not in ("mse", "msssim"):
            raise ValueError("metric must be 'mse' or 'msssim'")

    @property
    def ar_enabled(self) -> bool:
        return self.net.ar

    @property
    def lam(self) -> float:
        table = LAMBDAS_MSE if self.metric == "mse" else LAMBDAS_MSSSIM
        return float(table[self.lambda_index])


def frame_types(count: int, gop: int) -> str:
    return "".join("I" if t % gop == 0 else "P" for t in range(count))


# --- bitstream -------------------------------------------------------------------

@dataclass(frozen=True)
class Header:
    width: int
    height: int
    gop: int
    frame_count: int
    lambda_index: int
    checkpoint_id: int
    ar: bool = False
    pixel_level: bool = False
    version: int = VERSION

    def pack(self) -> bytes:
        flags = (FLAG_AR if self.ar else 0) | (FLAG_PIXEL_LEVEL if self.pixel_level else 0)
        return _HEADER.pack(
            MAGIC, self.version, flags, self.width, self.height, self.gop,
            self.frame_count, self.lambda_index, self.checkpoint_id,
        )

    @classmethod
    def unpack(cls, data: bytes) -> Header:
        if len(data) < 4 or data[:4] != MAGIC:
            raise BadMagicError("not an ENVC bitstream (bad magic)")
        if len(data) < _HEADER.size:
            raise TruncatedStreamError("bitstream header truncated")
        _, version, flags, w, h, gop, count, lam, ckpt = _HEADER.unpack_from(data)
        if version != VERSION:
            raise VersionError(f"unsupported bitstream version {version}")
        return cls(w, h, gop, count, lam, ckpt, bool(flags & FLAG_AR), bool(flags & FLAG_PIXEL_LEVEL), version)


@dataclass
class FrameStats:
    index: int
    kind: str
    motion_bits: int
    residual_bits: int
    estimated_bits: float

    @property
    def bits(self) -> int:
        return self.motion_bits + self.residual_bits

    @property
    def motion_fraction(self) -> float:
        return self.motion_bits / self.bits if self.kind == "P" and self.bits else 0.0


@dataclass
class EncodeResult:
    data: bytes
    stats: list[FrameStats]
    reconstructions: list[Frame]

    def bpp(self, width: int, height: int) -> float:
        payload = sum(s.bits for s in self.stats)
        return payload / (width * height * len(self.stats))


def _chunk(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def encode_iframe(model: BaseCodecModel, x: Tensor):
    """Returns (chunk, reconstruction, coded latent)."""
    coded = model.i_frame.compress(x)
    return coded.payload, coded.out, coded


def encode_pframe(model: BaseCodecModel, x: Tensor, ref: Tensor):
    """Returns (motion chunk, residual chunk, reconstruction, (motion, residual) coded latents)."""
    if x.shape != ref.shape:
        raise ValueError(f"reference {ref.shape} and target {x.shape} differ in size")
    mot, res, x_hat = model.encode_pframe(x, ref)
    return mot.payload, res.payload, x_hat, (mot, res)


def encode_sequence(
    frames: list[Frame], model: BaseCodecModel, cfg: CodecConfig, checkpoint_id: int
) -> EncodeResult:
    if not frames:
        raise ValueError("nothing to encode")
    w, h = frames[0].width, frames[0].height
    if w > _MAX_DIM or h > _MAX_DIM:
        raise ValueError("frame dimensions exceed 65535")
    header = Header(
        w, h, cfg.gop_size, len(frames), cfg.lambda_index, checkpoint_id,
        ar=model.cfg.ar, pixel_level=model.kind == "pixel_level",
    )
    out = bytearray(header.pack())
    stats: list[FrameStats] = []
    recons: list[Frame] = []
    ref: Tensor | None = None
    for t, (kind, frame) in enumerate(zip(frame_types(len(frames), cfg.gop_size), frames)):
        if (frame.width, frame.height) != (w, h):
            raise ValueError("all frames of a sequence must share one size")
        x = pad_frame(frame_to_tensor(frame), cfg.pad_multiple)
        if kind == "I":
            chunk, x_hat, coded = encode_iframe(model, x)
            out += b"I" + _chunk(chunk)
            stats.append(FrameStats(t, "I", 0, 8 * len(chunk), coded.estimated_bits))
        else:
            m_chunk, r_chunk, x_hat, (mot, res) = encode_pframe(model, x, ref)
            out += b"P" + _chunk(m_chunk) + _chunk(r_chunk)
            stats.append(
                FrameStats(t, "P", 8 * len(m_chunk), 8 * len(r_chunk), mot.estimated_bits + res.estimated_bits)
            )
        ref = as_reference(x_hat)
        recons.append(tensor_to_frame(ref, w, h))
    return EncodeResult(bytes(out), stats, recons)


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(f"bitstream truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def chunk(self, what: str) -> bytes:
        (n,) = struct.unpack("<I", self.take(4, f"{what} length"))
        return self.take(n, what)


def decode_sequence(data: bytes, model: BaseCodecModel, checkpoint_id: int) -> list[Frame]:
    header = Header.unpack(data)
    if header.checkpoint_id != checkpoint_id:
        raise CheckpointMismatchError(
            f"bitstream expects checkpoint {header.checkpoint_id:016x}, loaded {checkpoint_id:016x}"
        )
    if header.ar != model.cfg.ar or header.pixel_level != (model.kind == "pixel_level"):
        raise CheckpointMismatchError("bitstream flags do not match the loaded model")
    pw, ph = padded_size(header.width, header.height)
    reader = _Reader(data, _HEADER.size)
    frames: list[Frame] = []
    ref: Tensor | None = None
    for t, expected in enumerate(frame_types(header.frame_count, header.gop)):
        kind = reader.take(1, "frame type").decode("latin-1")
        if kind != expected:
            raise CorruptChunkError(f"frame {t}: type {kind!r}, expected {expected!r}")
        try:
            if kind == "I":
                x_hat = model.i_frame.decompress(reader.chunk("I-frame chunk"), ph, pw)
            else:
                m_chunk = reader.chunk("motion chunk")
                r_chunk = reader.chunk("residual chunk")
                x_hat = model.decode_pframe(m_chunk, r_chunk, ref)
        except (CorruptStreamError, ChunkError) as exc:
            raise CorruptChunkError(f"frame {t}: {exc}") from exc
        ref = as_reference(x_hat)
        frames.append(tensor_to_frame(ref, header.width, header.height))
    if reader.pos != len(data):
        raise CorruptChunkError("trailing bytes after the last frame")
    return frames


# --- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"ENVCCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model: BaseCodecModel
    stage: int = 0
    seed: int = 0
    frozen: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def checkpoint_id(self) -> int:
        return parameter_digest(self.model)


def _param_bytes(model: BaseCodecModel) -> list[tuple[str, np.ndarray]]:
    return [(name, np.ascontiguousarray(p.data, dtype="<f4")) for name, p in model.named_parameters()]


def parameter_digest(model: BaseCodecModel) -> int:
    h = hashlib.sha256()
    for _, arr in _param_bytes(model):
        h.update(arr.tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> int:
    params = _param_bytes(ckpt.model)
    digest = parameter_digest(ckpt.model)
    meta = {
        "version": CKPT_VERSION,
        "model_kind": ckpt.model.kind,
        "net_config": ckpt.model.cfg.to_dict(),
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "frozen": list(ckpt.frozen),
        "checkpoint_id": f"{digest:016x}",
        "conventions": {
            "leaky_relu_slope": LEAKY_SLOPE,
            "padding": "zero",
            "hyperprior_outputs": "mean_and_scale",
            "distortion": "mse_on_unit_range_rgb",
            "loss": "bits_per_pixel + lambda * distortion",
        },
        "extra": ckpt.extra,
        "params": [[name, list(arr.shape)] for name, arr in params],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, arr in params:
            f.write(arr.tobytes())
    return digest


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC or len(data) < 12:
        raise CheckpointError(f"{path}: not an ENVC checkpoint")
    (n,) = struct.unpack_from("<I", data, 8)
    try:
        meta = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata") from exc
    if meta.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = NetConfig(**meta["net_config"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: network configuration {cfg} differs from expected {expect}")
    model = build_model(meta["model_kind"], cfg)
    pos = 12 + n
    named = dict(model.named_parameters())
    if [name for name, _ in meta["params"]] != list(named):
        raise CheckpointError(f"{path}: parameter list does not match the model layout")
    for name, shape in meta["params"]:
        p = named[name]
        if tuple(shape) != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(shape)}, model expects {p.shape}")
        size = 4 * int(np.prod(shape))
        if pos + size > len(data):
            raise CheckpointError(f"{path}: parameter data truncated at {name}")
        p.data = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += size
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    if f"{parameter_digest(model):016x}" != meta["checkpoint_id"]:
        raise CheckpointError(f"{path}: parameter digest does not match checkpoint_id")
    model.set_frozen(meta["frozen"])
    return Checkpoint(model, meta["stage"], meta["seed"], tuple(meta["frozen"]), meta.get("extra", {}))


__all__ = [
    "LAMBDAS_MSE",
    "LAMBDAS_MSSSIM",
    "BadMagicError",
    "BitstreamError",
    "Checkpoint",
    "CheckpointError",
    "CheckpointMismatchError",
    "CodecConfig",
    "CorruptChunkError",
    "EncodeResult",
    "Frame",
    "FrameStats",
    "Header",
    "TruncatedStreamError",
    "VersionError",
    "as_reference",
    "decode_sequence",
    "encode_iframe",
    "encode_pframe",
    "encode_sequence",
    "frame_to_tensor",
    "frame_types",
    "load_checkpoint",
    "pad_frame",
    "padded_size",
    "parameter_digest",
    "read_rvf",
    "save_checkpoint",
    "tensor_to_frame",
    "write_rvf",
]
