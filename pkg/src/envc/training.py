"""Rate-distortion losses, the staged soft-then-hard schedule and true-RD evaluation."""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import CodecConfig, Frame, encode_sequence, parameter_digest
from .core import AdamState, Graph, Tensor, adam_step, generator, mse, no_grad
from .entropy.models import QuantMode
from .model import BaseCodecModel

log = logging.getLogger(__name__)

MODULATION_START = 1.0
MODULATION_STEP = 0.2

STAGE_ORDER = ("1", "2", "3", "4", "5", "6a", "6b")
I_ENCODERS = ("i_frame.g_a", "i_frame.h_a")
I_FRAME = ("i_frame.g_a", "i_frame.g_s", "i_frame.h_a", "i_frame.h_s")

AUN, ROUND, STE = QuantMode.AUN, QuantMode.ROUND, QuantMode.STE


def modulation_weights(p_frames: int) -> list[float]:
    """Distortion multipliers for P-frames 1..p_frames of a training GoP."""
    return [MODULATION_START + MODULATION_STEP * i for i in range(p_frames)]


# --- losses --------------------------------------------------------------------

@dataclass
class FrameTerms:
    kind: str
    rate: Tensor  # bits per pixel
    dist: Tensor  # MSE on [0, 1] samples

    @property
    def values(self) -> tuple[float, float]:
        return float(self.rate.data), float(self.dist.data)


def rd_loss(terms: Sequence[FrameTerms], lam: float, modulated: bool = False) -> Tensor:
    """R_I + lam * D_I + sum_t (R_t + mu_t * lam * D_t); mu_t = 1 when not modulated."""
    p_count = sum(1 for t in terms if t.kind == "P")
    mus = iter(modulation_weights(p_count) if modulated else [1.0] * p_count)
    loss = None
    for t in terms:
        weight = lam * (next(mus) if t.kind == "P" else 1.0)
        term = t.rate + weight * t.dist
        loss = term if loss is None else loss + term
    return loss


# --- stage plans -----------------------------------------------------------------

@dataclass(frozen=True)
class QuantPlan:
    i_frame: QuantMode = AUN
    motion: QuantMode = AUN
    residual: QuantMode = AUN


@dataclass(frozen=True)
class StagePlan:
    stage: str
    gop_T: int
    frozen: tuple[str, ...] = ()
    quant: QuantPlan = QuantPlan()
    modulated: bool = False
    lr: float = 1e-3
    lr_after_decay: float = 1e-4
    decay_step: int | None = None
    iterations: int = 1000
    # "ground_truth": every P-frame references the original previous frame
    reference: str = "reconstruction"
    covers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.reference not in ("ground_truth", "reconstruction"):
            raise ValueError("reference must be 'ground_truth' or 'reconstruction'")
        if self.gop_T < 1:
            raise ValueError("gop_T must be >= 1")

    @property
    def stages(self) -> tuple[str, ...]:
        return self.covers or (self.stage,)

    def lr_at(self, it: int) -> float:
        if self.decay_step is not None and it >= self.decay_step:
            return self.lr_after_decay
        return self.lr


BUDGETS = {
    # iterations per stage: 1, 2, 3, 4, 5, 6a, 6b
    "paper": dict(zip(STAGE_ORDER, (1_000_000, 1_000_000, 200_000, 25_000, 25_000, 20_000, 20_000))),
    "desk": dict(zip(STAGE_ORDER, (2000, 2000, 2000, 500, 500, 500, 500))),
    "toy": dict(zip(STAGE_ORDER, (300, 300, 300, 150, 100, 100, 100))),
}
_RATES = {
    "paper": (5e-5, 1e-5, 1e-5),
    "desk": (1e-3, 1e-4, 1e-4),
    "toy": (1e-3, 1e-4, 1e-4),
}


def stage_plan(stage: str, preset: str = "desk", iterations: int | None = None, modulated: bool | None = None) -> StagePlan:
    """The schedule row for ``stage`` ('1'..'5', '6a', '6b', or merged '4+5')."""
    if preset not in BUDGETS:
        raise ValueError(f"unknown preset {preset!r}")
    budget = BUDGETS[preset]
    lr, lr_low, lr_fine = _RATES[preset]
    if stage == "4+5":
        n = iterations if iterations is not None else budget["4"] + budget["5"]
        plan = StagePlan(
            "4+5", 5, I_ENCODERS, QuantPlan(i_frame=ROUND), True, lr, lr_low, int(0.4 * n), n, covers=("4", "5")
        )
    else:
        if stage not in STAGE_ORDER:
            raise ValueError(f"unknown stage {stage!r}")
        n = iterations if iterations is not None else budget[stage]
        decay = n // 2
        plans = {
            "1": StagePlan("1", 1, (), QuantPlan(), False, lr, lr_low, decay, n),
            "2": StagePlan("2", 2, (), QuantPlan(), False, lr, lr_low, decay, n, "ground_truth"),
            "3": StagePlan("3", 3, (), QuantPlan(), False, lr, lr_low, decay, n),
            "4": StagePlan("4", 5, (), QuantPlan(), True, lr, lr_low, int(0.4 * n), n),
            "5": StagePlan("5", 5, I_ENCODERS, QuantPlan(i_frame=ROUND), True, lr_low, lr_fine, None, n),
            "6a": StagePlan(
                "6a", 5, I_FRAME + ("motion.g_a",), QuantPlan(ROUND, STE, STE), True, lr_fine, lr_fine, None, n
            ),
            "6b": StagePlan("6b", 5, (), QuantPlan(ROUND, ROUND, ROUND), True, lr_fine, lr_fine, None, n),
        }
        plan = plans[stage]
    if modulated is not None:
        plan = replace(plan, modulated=modulated)
    return plan


def trainable_in_6b(model: BaseCodecModel) -> tuple[str, ...]:
    keep = {"residual.g_s", "residual.h_s"}
    return tuple(g for g in model.groups() if g not in keep)


# --- data --------------------------------------------------------------------------

class ClipSource:
    """Random temporal windows and spatial crops from a fixed set of clips."""

    def __init__(self, clips: Sequence[Sequence[Frame]], crop: int = 64):
        self.clips = [np.stack([f.rgb for f in c]).astype(np.float32) / np.float32(255.0) for c in clips]
        self.crop = crop
        for c in self.clips:
            if c.shape[2] < crop or c.shape[3] < crop:
                raise ValueError(f"clip {c.shape[2:]} smaller than crop {crop}")

    def sample(self, rng: np.random.Generator, length: int, batch: int = 1) -> list[Tensor]:
        """``length`` frames, each a [batch, 3, crop, crop] tensor."""
        picks = []
        for _ in range(batch):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            t, _, h, w = clip.shape
            if t < length:
                raise ValueError(f"clip has {t} frames, need {length}")
            t0 = int(rng.integers(t - length + 1))
            y0 = int(rng.integers(h - self.crop + 1))
            x0 = int(rng.integers(w - self.crop + 1))
            picks.append(clip[t0 : t0 + length, :, y0 : y0 + self.crop, x0 : x0 + self.crop])
        arr = np.stack(picks, axis=1)
        return [Tensor(np.ascontiguousarray(arr[i])) for i in range(length)]


# --- forward over a clip --------------------------------------------------------------

def clip_terms(
    model: BaseCodecModel,
    frames: Sequence[Tensor],
    quant: QuantPlan,
    rng: np.random.Generator | None,
    reference: str = "reconstruction",
    p_only: bool = False,
) -> list[FrameTerms]:
    """Per-frame (rate, distortion) for one training GoP.

    With ``p_only`` frame 0 is only used as a reference (P-frame pretraining).
    """
    b, _, h, w = frames[0].shape
    pixels = float(b * h * w)
    terms: list[FrameTerms] = []
    ref: Tensor | None = None
    for t, x in enumerate(frames):
        if t == 0:
            if p_only:
                ref = x
                continue
            r = model.iframe_forward(x, quant.i_frame, rng)
            kind = "I"
        else:
            r = model.pframe_forward(x, ref, quant.motion, quant.residual, rng)
            kind = "P"
        terms.append(FrameTerms(kind, r.bits * (1.0 / pixels), mse(r.x_hat, x)))
        ref = x if reference == "ground_truth" else r.x_hat
    return terms


def _plan_is_p_only(plan: StagePlan) -> bool:
    return plan.reference == "ground_truth"


# --- stage runner ----------------------------------------------------------------

@dataclass
class TrainState:
    stage_tag: str = "0"
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def ordinal(self) -> int:
        return 0 if self.stage_tag == "0" else STAGE_ORDER.index(self.stage_tag) + 1


class StageOrderError(ValueError):
    pass


def check_stage_order(state: TrainState, plan: StagePlan) -> None:
    first = STAGE_ORDER.index(plan.stages[0]) + 1
    if first > state.ordinal + 1:
        missing = STAGE_ORDER[state.ordinal : first - 1]
        raise StageOrderError(f"stage {plan.stage} would skip stage(s) {', '.join(missing)}")


class CsvLog:
    """Training log: iteration, stage, R_I, D_I, per-frame R_t and D_t, loss."""

    FIELDS = ("iteration", "stage", "R_I", "D_I", "R_P", "D_P", "loss")

    def __init__(self, path: str | Path | None):
        self.path = path
        self._f = None
        if path is not None:
            self._f = open(path, "w", newline="")
            self._w = csv.writer(self._f)
            self._w.writerow(self.FIELDS)

    def write(self, it: int, stage: str, terms: Sequence[FrameTerms], loss: float) -> dict:
        i_terms = [t.values for t in terms if t.kind == "I"]
        p_terms = [t.values for t in terms if t.kind == "P"]
        row = {
            "iteration": it,
            "stage": stage,
            "R_I": i_terms[0][0] if i_terms else "",
            "D_I": i_terms[0][1] if i_terms else "",
            "R_P": ";".join(f"{r:.6g}" for r, _ in p_terms),
            "D_P": ";".join(f"{d:.6g}" for _, d in p_terms),
            "loss": loss,
        }
        if self._f is not None:
            self._w.writerow([row[k] for k in self.FIELDS])
        return row

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


def run_stage(
    model: BaseCodecModel,
    plan: StagePlan,
    source: ClipSource,
    lam: float,
    state: TrainState,
    batch: int = 1,
    logger: CsvLog | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainState:
    """Optimise ``model`` for one stage; returns the advanced state."""
    check_stage_order(state, plan)
    frozen = plan.frozen if plan.stage != "6b" else trainable_in_6b(model)
    model.set_frozen(frozen)
    params = [p for p in model.parameters() if p.requires_grad]
    adam = AdamState()
    ordinal = STAGE_ORDER.index(plan.stages[-1]) + 1
    p_only = _plan_is_p_only(plan)
    for it in range(plan.iterations):
        rng = generator(state.seed, ordinal, it)
        frames = source.sample(rng, plan.gop_T, batch)
        with Graph():
            terms = clip_terms(model, frames, plan.quant, rng, plan.reference, p_only)
            loss = rd_loss(terms, lam, plan.modulated)
            for p in params:
                p.grad = None
            loss.backward()
        adam_step(params, adam, plan.lr_at(it))
        value = float(loss.data)
        row = (logger or CsvLog(None)).write(it, plan.stage, terms, value)
        state.history.append(row)
        if callback is not None:
            callback(it, value)
    for p in model.parameters():
        p.grad = None
    model.set_frozen(())
    return TrainState(plan.stages[-1], state.seed, state.history)


def run_schedule(
    model: BaseCodecModel,
    stages: Sequence[str],
    source: ClipSource,
    lam: float,
    preset: str = "desk",
    seed: int = 0,
    batch: int = 1,
    logger: CsvLog | None = None,
    state: TrainState | None = None,
) -> TrainState:
    state = state or TrainState(seed=seed)
    for s in stages:
        state = run_stage(model, stage_plan(s, preset), source, lam, state, batch, logger)
    return state


# --- evaluation -------------------------------------------------------------------

@dataclass
class TrueRD:
    bpp: float
    mse: float
    loss: float
    motion_fraction: float = 0.0
    per_frame_psnr: list[float] = field(default_factory=list)


def eval_true_rd(model: BaseCodecModel, clips: Sequence[Sequence[Frame]], lam: float) -> TrueRD:
    """Actual coded bits and 8-bit reconstruction error, hard quantisation throughout.

    The loss is the per-frame mean of bpp_t + lam * mse_t, averaged over clips.
    """
    from .eval.metrics import psnr

    losses, bpps, mses, fracs = [], [], [], []
    psnr_rows = []
    cid = parameter_digest(model)
    for clip in clips:
        cfg = CodecConfig(net=model.cfg, gop_size=max(1, min(255, len(clip))))
        res = encode_sequence(list(clip), model, cfg, cid)
        w, h = clip[0].width, clip[0].height
        frame_loss = []
        for st, ref, rec in zip(res.stats, clip, res.reconstructions):
            d = float(np.mean(((ref.rgb.astype(np.float64) - rec.rgb) / 255.0) ** 2))
            b = st.bits / (w * h)
            frame_loss.append(b + lam * d)
            bpps.append(b)
            mses.append(d)
        psnr_rows.append([psnr(r.rgb, d.rgb) for r, d in zip(clip, res.reconstructions)])
        p_stats = [s for s in res.stats if s.kind == "P"]
        if p_stats:
            total = sum(s.bits for s in p_stats)
            fracs.append(sum(s.motion_bits for s in p_stats) / total if total else 0.0)
        losses.append(float(np.mean(frame_loss)))
    per_frame = [float(v) for v in np.mean(np.array(psnr_rows), axis=0)] if psnr_rows else []
    return TrueRD(
        float(np.mean(bpps)),
        float(np.mean(mses)),
        float(np.mean(losses)),
        float(np.mean(fracs)) if fracs else 0.0,
        per_frame,
    )


def clip_loss(
    model: BaseCodecModel,
    clip: Sequence[Frame],
    lam: float,
    quant: QuantPlan = QuantPlan(),
    seed: int = 0,
) -> float:
    """Unmodulated joint RD loss per frame on one whole clip, with a fixed noise seed."""
    frames = [Tensor((f.rgb.astype(np.float32) / np.float32(255.0))[None]) for f in clip]
    with no_grad():
        terms = clip_terms(model, frames, quant, generator(seed, 1234))
        return float(rd_loss(terms, lam).data) / len(terms)


# --- config files -----------------------------------------------------------------

@dataclass
class TrainConfig:
    preset: str = "desk"
    lambda_index: int = 1
    seed: int = 0
    stages: tuple[str, ...] = ("1", "2", "3", "4+5", "6a", "6b")
    ar: bool = False
    model: str = "cross_scale"
    clips: int = 8
    frames: int = 7
    size: int = 96
    crop: int = 64
    batch: int = 1
    # per-stage iteration count; 0 keeps the preset budget
    iterations: int = 0
    data: tuple[str, ...] = ()


def parse_config(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment. Lists are comma-separated."""
    cfg = TrainConfig()
    kinds = {f: type(getattr(cfg, f)) for f in cfg.__dataclass_fields__}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = kinds[key]
        if kind is bool:
            if val.lower() not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(f"config line {lineno}: {key} must be on/off")
            values[key] = val.lower() in ("on", "true", "1")
        elif kind is tuple:
            values[key] = tuple(v.strip() for v in val.split(",") if v.strip())
        else:
            values[key] = kind(val)
    return replace(cfg, **values)


__all__ = [
    "BUDGETS",
    "MODULATION_START",
    "MODULATION_STEP",
    "STAGE_ORDER",
    "ClipSource",
    "CsvLog",
    "FrameTerms",
    "QuantPlan",
    "StageOrderError",
    "StagePlan",
    "TrainConfig",
    "TrainState",
    "TrueRD",
    "check_stage_order",
    "clip_loss",
    "clip_terms",
    "eval_true_rd",
    "modulation_weights",
    "parse_config",
    "rd_loss",
    "run_schedule",
    "run_stage",
    "stage_plan",
]
