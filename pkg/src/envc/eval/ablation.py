"""Prediction ablation: pixel-level flow warping vs cross-scale feature prediction."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..codec import CodecConfig, Frame, decode_sequence, encode_sequence, parameter_digest
from ..model import BaseCodecModel, build_model
from ..nets import NetConfig
from ..training import ClipSource, TrainState, TrueRD, eval_true_rd, run_stage, stage_plan

ABLATION_STAGES = ("1", "2", "3", "4")
MODES = ("pixel_level", "cross_scale")


@dataclass
class AblationResult:
    mode: str
    seed: int
    rd: TrueRD
    parameters: int
    decodable: bool

    @property
    def row(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "bpp": self.rd.bpp,
            "psnr": float(np.mean(self.rd.per_frame_psnr)),
            "rd_loss": self.rd.loss,
            "motion_fraction": self.rd.motion_fraction,
            "parameters": self.parameters,
            "decodable": self.decodable,
        }


def train_arm(
    mode: str,
    cfg: NetConfig,
    train_clips: Sequence[Sequence[Frame]],
    lam: float,
    preset: str = "toy",
    seed: int = 0,
    iterations: dict[str, int] | None = None,
    crop: int = 64,
    batch: int = 1,
) -> BaseCodecModel:
    """Stages 1-4 of the schedule with the same budget for either arm."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    model = build_model(mode, cfg, seed)
    source = ClipSource(train_clips, crop)
    state = TrainState(seed=seed)
    for s in ABLATION_STAGES:
        n = None if iterations is None else iterations.get(s)
        state = run_stage(model, stage_plan(s, preset, iterations=n), source, lam, state, batch)
    return model


def roundtrip_ok(model: BaseCodecModel, clip: Sequence[Frame]) -> bool:
    cid = parameter_digest(model)
    res = encode_sequence(list(clip), model, CodecConfig(net=model.cfg, gop_size=len(clip)), cid)
    dec = decode_sequence(res.data, model, cid)
    return all(np.array_equal(a.rgb, b.rgb) for a, b in zip(dec, res.reconstructions))


def run_ablation(
    mode: str,
    train_clips: Sequence[Sequence[Frame]],
    eval_clips: Sequence[Sequence[Frame]],
    lam: float,
    cfg: NetConfig,
    preset: str = "toy",
    seed: int = 0,
    iterations: dict[str, int] | None = None,
    model: BaseCodecModel | None = None,
    batch: int = 1,
) -> AblationResult:
    """Train one arm (unless ``model`` is given) and measure true RD on ``eval_clips``."""
    if model is None:
        model = train_arm(mode, cfg, train_clips, lam, preset, seed, iterations, batch=batch)
    rd = eval_true_rd(model, eval_clips, lam)
    return AblationResult(mode, seed, rd, sum(p.size for p in model.parameters()), roundtrip_ok(model, eval_clips[0]))


__all__ = ["ABLATION_STAGES", "MODES", "AblationResult", "roundtrip_ok", "run_ablation", "train_arm"]
