from __future__ import annotations

import csv

import pytest
from oracles import shifted_curve

from envc.cli import EXIT_CODES, main
from envc.codec import Checkpoint, read_rvf, save_checkpoint
from envc.model import build_model
from envc.nets import NetConfig


def rows_of(text: str) -> list[dict]:
    return list(csv.DictReader(text.splitlines()))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_checkpoint(d / "toy.ckpt", Checkpoint(build_model("cross_scale", NetConfig.preset("toy"), 0)))
    assert main(["synth", "--kind", "occluder", "--size", "40x36", "--frames", "3", "--seed", "1", "--out", str(d / "clip.rvf")]) == 0
    return d


def test_encode_decode_round_trip(workdir, capsys):
    d = workdir
    ck = str(d / "toy.ckpt")
    assert main(["encode", str(d / "clip.rvf"), "--checkpoint", ck, "--out", str(d / "clip.envc")]) == 0
    stats = rows_of(capsys.readouterr().out)
    assert [r["type"] for r in stats] == ["I", "P", "P", ""]
    assert main(["decode", str(d / "clip.envc"), "--checkpoint", ck, "--out", str(d / "dec.rvf")]) == 0
    dec = read_rvf(d / "dec.rvf")
    assert len(dec) == 3 and all((f.width, f.height) == (40, 36) for f in dec)


def test_metrics_of_identical_clips(workdir, capsys):
    clip = str(workdir / "clip.rvf")
    assert main(["metrics", clip, clip]) == 0
    mean = rows_of(capsys.readouterr().out)[-1]
    assert mean["frame"] == "mean" and float(mean["psnr"]) == 100.0 and float(mean["msssim"]) == 1.0


def test_bdrate_prints_two_decimals(tmp_path, capsys):
    ar, aq, tr, tq = shifted_curve()
    for name, rates, qual in (("a.csv", ar, aq), ("t.csv", tr, tq)):
        (tmp_path / name).write_text("bpp,psnr\n" + "".join(f"{r},{q}\n" for r, q in zip(rates, qual)))
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "t.csv")]) == 0
    assert capsys.readouterr().out == "-10.00\n"


def test_bdrate_rejects_missing_columns(tmp_path):
    (tmp_path / "a.csv").write_text("rate,quality\n1,2\n")
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == 4


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["encode", "--bogus"]) == 2


def test_help_lists_exit_codes(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for code, _ in EXIT_CODES:
        assert f"  {code:>3}  " in out


def test_missing_input_is_io_error(tmp_path, workdir):
    assert main(["decode", str(tmp_path / "nope.envc"), "--checkpoint", str(workdir / "toy.ckpt"), "--out", str(tmp_path / "x.rvf")]) == 3


@pytest.mark.parametrize(
    "mutate,code",
    [
        (lambda b: b"XXXX" + b[4:], 11),
        (lambda b: b[:4] + b"\x09" + b[5:], 12),
        (lambda b: b[: len(b) // 2], 14),
        (lambda b: b + b"\x00", 15),
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_bitstream_errors_map_to_exit_codes(workdir, tmp_path, mutate, code):
    d = workdir
    ck = str(d / "toy.ckpt")
    src = tmp_path / "s.envc"
    assert main(["encode", str(d / "clip.rvf"), "--checkpoint", ck, "--out", str(src), "--stats", str(tmp_path / "s.csv")]) == 0
    bad = tmp_path / "bad.envc"
    bad.write_bytes(mutate(src.read_bytes()))
    assert main(["decode", str(bad), "--checkpoint", ck, "--out", str(tmp_path / "o.rvf")]) == code


def test_wrong_checkpoint_is_code_13(workdir, tmp_path):
    d = workdir
    other = tmp_path / "other.ckpt"
    save_checkpoint(other, Checkpoint(build_model("cross_scale", NetConfig.preset("toy"), 1)))
    assert main(["encode", str(d / "clip.rvf"), "--checkpoint", str(d / "toy.ckpt"), "--out", str(tmp_path / "s.envc"), "--stats", str(tmp_path / "s.csv")]) == 0
    assert main(["decode", str(tmp_path / "s.envc"), "--checkpoint", str(other), "--out", str(tmp_path / "o.rvf")]) == 13


def test_ar_flag_mismatch_exit_6(workdir, tmp_path):
    d = workdir
    assert main(["encode", str(d / "clip.rvf"), "--checkpoint", str(d / "toy.ckpt"), "--ar", "on", "--out", str(tmp_path / "x.envc")]) == 6


def test_corrupt_checkpoint_exit_5(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((workdir / "toy.ckpt").read_bytes())
    raw[-3] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert main(["encode", str(workdir / "clip.rvf"), "--checkpoint", str(bad), "--out", str(tmp_path / "x.envc")]) == 5


def test_train_is_reproducible_for_fixed_seed(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("preset = toy\nstages = 1,2\niterations = 2\nclips = 2\nframes = 3\nsize = 64\nseed = 3\n")
    ids = []
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / f"{name}.ckpt")]) == 0
        ids.append(capsys.readouterr().out)
    assert ids[0] == ids[1] and ids[0].startswith("checkpoint_id,")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    log = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["stage"] for r in log] == ["1", "1", "2", "2"]


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--kind", "fast_translate", "--seed", "7", "--out", str(tmp_path / f"{name}.rvf")]) == 0
    assert (tmp_path / "a.rvf").read_bytes() == (tmp_path / "b.rvf").read_bytes()


def test_viz_writes_files(workdir, tmp_path, capsys):
    out = tmp_path / "viz"
    assert main(["viz", str(workdir / "clip.rvf"), "--checkpoint", str(workdir / "toy.ckpt"), "--out", str(out)]) == 0
    assert (out / "weight_scale_1.ppm").exists()
    assert main(["viz", str(workdir / "clip.rvf"), "--checkpoint", str(workdir / "toy.ckpt"), "--frame", "9", "--out", str(out)]) == 4
