"""PPM dumps of weight maps, per-scale displacement fields and prediction-only frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..codec import Frame, frame_to_tensor, pad_frame, tensor_to_frame
from ..core import no_grad
from ..entropy.models import QuantMode
from ..model import ENVCModel
from ..prediction import dominant_flows, total_weight_maps


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6 from (3, H, W) or (H, W) uint8 samples."""
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    return np.frombuffer(body[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


def _color_wheel() -> np.ndarray:
    """(55, 3) hue ring of the usual optical-flow colour coding."""
    segments = ((15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0)))
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.asarray(a) * (1 - t) + np.asarray(b) * t)
    return np.concatenate(rows) / 255.0


def flow_to_color(flow: np.ndarray, max_radius: float | None = None) -> tuple[np.ndarray, float]:
    """(2, H, W) flow to (3, H, W) uint8; zero motion is white. Returns the radius used."""
    u, v = flow[0].astype(np.float64), flow[1].astype(np.float64)
    rad = np.hypot(u, v)
    if max_radius is None:
        max_radius = float(rad.max())
    scale = max_radius if max_radius > 0 else 1.0
    u, v, rad = u / scale, v / scale, rad / scale
    wheel = _color_wheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[None]
    col = (1 - f) * wheel[k0].transpose(2, 0, 1) + f * wheel[k1].transpose(2, 0, 1)
    inside = rad <= 1
    col = np.where(inside[None], 1 - rad[None] * (1 - col), col * 0.75)
    return np.clip(np.rint(col * 255), 0, 255).astype(np.uint8), max_radius


def dump_visualizations(model: ENVCModel, ref: Frame, cur: Frame, out_dir: str | Path) -> list[Path]:
    """Write weight maps, dominant flows and the two prediction-only frames; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if (ref.width, ref.height) != (cur.width, cur.height):
        raise ValueError("reference and current frames differ in size")
    x_ref = pad_frame(frame_to_tensor(ref))
    x_cur = pad_frame(frame_to_tensor(cur))
    with no_grad():
        i_frame = model.i_frame.forward(x_ref, QuantMode.ROUND).out
        pred, field = model.prediction_only(x_cur, i_frame)
        pred_s1, _ = model.prediction_only(x_cur, i_frame, scale_mask=(1.0, 0.0, 0.0))
    heads = field.heads
    hw = ((ref.height + 1) // 2, (ref.width + 1) // 2)
    weights = total_weight_maps(field)[0][:, : hw[0], : hw[1]]
    flows = dominant_flows(field)[0][:, :, : hw[0], : hw[1]]
    written: list[Path] = []
    notes = [
        f"heads={heads}",
        "weight_scale_<s>.ppm: per-scale total weight (sum over samples and heads); white = weight equal to heads",
        "flow_scale_<s>.ppm: highest-weight sample offset per scale, source-level pixels; zero motion is white",
    ]
    for s in range(weights.shape[0]):
        gray = np.clip(np.rint(weights[s] / heads * 255), 0, 255).astype(np.uint8)
        p = out / f"weight_scale_{s + 1}.ppm"
        write_ppm(p, gray)
        written.append(p)
        color, radius = flow_to_color(flows[s])
        p = out / f"flow_scale_{s + 1}.ppm"
        write_ppm(p, color)
        written.append(p)
        notes.append(f"flow_scale_{s + 1}: colour saturation normalised to max radius {radius:.6g}")
    for name, x in (("prediction_only.ppm", pred), ("scale1_only.ppm", pred_s1)):
        p = out / name
        write_ppm(p, tensor_to_frame(np.clip(x.data, 0, 1), ref.width, ref.height).rgb)
        written.append(p)
    side = out / "visualizations.txt"
    side.write_text("\n".join(notes) + "\n")
    written.append(side)
    return written


__all__ = ["dump_visualizations", "flow_to_color", "read_ppm", "write_ppm"]
