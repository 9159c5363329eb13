"""Command-line entry point: ``envc <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .codec import (
    LAMBDAS_MSE,
    BitstreamError,
    Checkpoint,
    CheckpointError,
    CodecConfig,
    decode_sequence,
    encode_sequence,
    load_checkpoint,
    read_rvf,
    save_checkpoint,
    write_rvf,
)
from .nets import NetConfig

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INPUT = 4
EXIT_CHECKPOINT = 5
EXIT_CONFIG_MISMATCH = 6

EXIT_CODES = (
    (EXIT_OK, "success"),
    (EXIT_INTERNAL, "unexpected internal error"),
    (EXIT_USAGE, "usage error: unknown subcommand or flag, bad flag value"),
    (EXIT_IO, "file could not be read or written"),
    (EXIT_INPUT, "invalid input data (RVF, CSV, config file, mismatched frames)"),
    (EXIT_CHECKPOINT, "checkpoint unreadable, corrupt or digest mismatch"),
    (EXIT_CONFIG_MISMATCH, "flags disagree with the checkpoint (e.g. --ar)"),
    (11, "bitstream: bad magic"),
    (12, "bitstream: unsupported version"),
    (13, "bitstream: checkpoint_id or model flags do not match"),
    (14, "bitstream: truncated"),
    (15, "bitstream: corrupt chunk or trailing bytes"),
)


class InputError(ValueError):
    code = EXIT_INPUT


class MismatchError(ValueError):
    code = EXIT_CONFIG_MISMATCH


def _exit_table() -> str:
    return "exit codes:\n" + "\n".join(f"  {code:>3}  {text}" for code, text in EXIT_CODES)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _pair(value: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in value.replace("x", ",").split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected two integers, got {value!r}") from exc
    return a, b


def _emit_csv(rows: list[dict], out: str | None) -> None:
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if out:
        Path(out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _load(path: str, ar: bool | None) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ar is not None and ar != ckpt.model.cfg.ar:
        raise MismatchError(f"--ar {'on' if ar else 'off'} but the checkpoint was built with ar={ckpt.model.cfg.ar}")
    return ckpt


# --- subcommands -------------------------------------------------------------------

def cmd_encode(args) -> int:
    frames = read_rvf(args.input)
    ckpt = _load(args.checkpoint, args.ar)
    cfg = CodecConfig(net=ckpt.model.cfg, gop_size=args.gop, lambda_index=args.lambda_index)
    res = encode_sequence(frames, ckpt.model, cfg, ckpt.checkpoint_id)
    Path(args.out).write_bytes(res.data)
    w, h = frames[0].width, frames[0].height
    rows = [
        {
            "frame": s.index,
            "type": s.kind,
            "motion_bits": s.motion_bits,
            "residual_bits": s.residual_bits,
            "bpp": s.bits / (w * h),
            "motion_fraction": s.motion_fraction,
        }
        for s in res.stats
    ]
    rows.append(
        {
            "frame": "total",
            "type": "",
            "motion_bits": sum(s.motion_bits for s in res.stats),
            "residual_bits": sum(s.residual_bits for s in res.stats),
            "bpp": res.bpp(w, h),
            "motion_fraction": "",
        }
    )
    _emit_csv(rows, args.stats)
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = _load(args.checkpoint, args.ar)
    frames = decode_sequence(Path(args.input).read_bytes(), ckpt.model, ckpt.checkpoint_id)
    write_rvf(args.out, frames)
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .eval.metrics import compute_metrics

    ref, dec = read_rvf(args.reference), read_rvf(args.decoded)
    try:
        rows, mean = compute_metrics(ref, dec)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = [{"frame": q.index, "psnr": f"{q.psnr_db:.6f}", "msssim": f"{q.msssim:.6f}"} for q in rows]
    out.append({"frame": "mean", "psnr": f"{mean.psnr_db:.6f}", "msssim": f"{mean.msssim:.6f}"})
    _emit_csv(out, args.out)
    return EXIT_OK


def read_rd_csv(path: str) -> tuple[list[float], list[float]]:
    """Rate/PSNR columns from a CSV with a header naming ``bpp`` and ``psnr``."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = {k.strip().lower(): k for k in (reader.fieldnames or [])}
        if "bpp" not in fields or "psnr" not in fields:
            raise InputError(f"{path}: need 'bpp' and 'psnr' columns")
        rates, quality = [], []
        for row in reader:
            try:
                rates.append(float(row[fields["bpp"]]))
                quality.append(float(row[fields["psnr"]]))
            except (TypeError, ValueError) as exc:
                raise InputError(f"{path}: non-numeric row {row}") from exc
    return rates, quality


def cmd_bdrate(args) -> int:
    from .eval.bdrate import bd_rate

    ar, aq = read_rd_csv(args.anchor)
    tr, tq = read_rd_csv(args.test)
    try:
        value = bd_rate(ar, aq, tr, tq)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    text = f"{value:.2f}\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .eval.synth import SyntheticSpec, gen_synthetic

    spec = SyntheticSpec(args.kind, args.magnitude, args.size, args.frames, args.seed)
    clip = gen_synthetic(spec)
    write_rvf(args.out, clip.frames)
    if args.masks:
        import numpy as np

        np.save(args.masks, np.stack(clip.disoccluded))
    return EXIT_OK


def cmd_train(args) -> int:
    from .eval.synth import suite
    from .training import ClipSource, CsvLog, TrainConfig, TrainState, parse_config, run_stage, stage_plan

    cfg = parse_config(Path(args.config).read_text()) if args.config else TrainConfig()
    overrides = {}
    for key in ("preset", "seed", "lambda_index", "ar"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    net_preset = "toy" if cfg.preset == "toy" else cfg.preset
    net = NetConfig.preset(net_preset, ar=cfg.ar)
    from .model import build_model

    model = build_model(cfg.model, net, cfg.seed)
    clips = [c.frames for c in suite(("translate", "fast_translate", "occluder"), cfg.clips, cfg.seed, (cfg.size, cfg.size), cfg.frames)]
    clips += [read_rvf(p) for p in cfg.data]
    source = ClipSource(clips, cfg.crop)
    lam = float(LAMBDAS_MSE[cfg.lambda_index])
    log_path = args.log or (str(Path(args.out).with_suffix(".csv")))
    logger = CsvLog(log_path)
    state = TrainState(seed=cfg.seed)
    try:
        for s in cfg.stages:
            plan = stage_plan(s, cfg.preset, iterations=cfg.iterations or None)
            state = run_stage(model, plan, source, lam, state, cfg.batch, logger)
    finally:
        logger.close()
    stage_num = int(state.stage_tag[0]) if state.stage_tag != "0" else 0
    digest = save_checkpoint(
        args.out, Checkpoint(model, stage_num, cfg.seed, (), {"stage_tag": state.stage_tag, "lambda": lam})
    )
    sys.stdout.write(f"checkpoint_id,{digest:016x}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .eval.ablation import MODES, run_ablation
    from .eval.synth import suite

    preset = args.preset or "toy"
    seed = args.seed or 0
    lam = float(LAMBDAS_MSE[args.lambda_index if args.lambda_index is not None else 1])
    net = NetConfig.preset("toy" if preset == "toy" else preset, ar=bool(args.ar))
    kinds = ("fast_translate", "occluder")
    train = [c.frames for c in suite(kinds, args.clips, seed, (80, 80), 5)]
    held = [c.frames for c in suite(kinds, 5, 1000 + seed, (64, 64), 5)]
    rows = [run_ablation(m, train, held, lam, net, preset, seed, batch=args.batch).row for m in MODES]
    _emit_csv(rows, args.out)
    return EXIT_OK


def cmd_viz(args) -> int:
    from .eval.viz import dump_visualizations
    from .model import ENVCModel

    ckpt = _load(args.checkpoint, args.ar)
    if not isinstance(ckpt.model, ENVCModel):
        raise MismatchError("visualisations need a cross-scale checkpoint")
    frames = read_rvf(args.input)
    t = args.frame
    if not 1 <= t < len(frames):
        raise InputError(f"--frame must be in [1, {len(frames) - 1}]")
    paths = dump_visualizations(ckpt.model, frames[t - 1], frames[t], args.out)
    _emit_csv([{"file": str(p)} for p in paths], None)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envc",
        description="Neural P-frame video codec with cross-scale prediction.",
        epilog=_exit_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, epilog=_exit_table(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    def model_flags(p, ckpt_required=True):
        p.add_argument("--checkpoint", required=ckpt_required, help="checkpoint file")
        p.add_argument("--ar", type=_on_off, default=None, metavar="on|off", help="assert the context-model setting")

    p = add("encode", "encode an RVF clip to an ENVC bitstream", cmd_encode)
    p.add_argument("input")
    model_flags(p)
    p.add_argument("--gop", type=int, default=12)
    p.add_argument("--lambda-index", type=int, default=1, choices=range(len(LAMBDAS_MSE)))
    p.add_argument("--out", required=True, help="bitstream path")
    p.add_argument("--stats", help="per-frame CSV path (default stdout)")

    p = add("decode", "decode an ENVC bitstream to RVF", cmd_decode)
    p.add_argument("input")
    model_flags(p)
    p.add_argument("--out", required=True, help="RVF path")

    p = add("train", "run training stages and write a checkpoint", cmd_train)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=("toy", "desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-index", type=int, choices=range(len(LAMBDAS_MSE)))
    p.add_argument("--ar", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--log", help="training CSV log path (default: <out>.csv)")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = add("metrics", "per-frame PSNR and MS-SSIM of two RVF clips", cmd_metrics)
    p.add_argument("reference")
    p.add_argument("decoded")
    p.add_argument("--out")

    p = add("bdrate", "BD-rate of test vs anchor curves (CSV with bpp, psnr)", cmd_bdrate)
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--out")

    p = add("synth", "generate a synthetic RVF clip", cmd_synth)
    p.add_argument("--kind", choices=("translate", "fast_translate", "occluder"), default="translate")
    p.add_argument("--magnitude", type=_pair, default=(2, 0), metavar="DX,DY")
    p.add_argument("--size", type=_pair, default=(64, 64), metavar="WxH")
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--masks", help="also save disocclusion masks (.npy)")
    p.add_argument("--out", required=True)

    p = add("ablate", "train and compare pixel-level vs cross-scale prediction", cmd_ablate)
    p.add_argument("--preset", choices=("toy", "desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-index", type=int, choices=range(len(LAMBDAS_MSE)))
    p.add_argument("--ar", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--out")

    p = add("viz", "dump weight maps, flows and prediction-only frames", cmd_viz)
    p.add_argument("input", help="RVF clip")
    model_flags(p)
    p.add_argument("--frame", type=int, default=1, help="current frame index (reference = frame - 1)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BitstreamError, CheckpointError, InputError, MismatchError) as exc:
        print(f"envc {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"envc {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"envc {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
