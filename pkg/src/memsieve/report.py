"""Report serialization and image rendering (heatmap strips, byte plots, Hilbert layouts)."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .stats import METRIC_RANGES, STAT_COLUMNS

CSV_COLUMNS = ("offset",) + STAT_COLUMNS


def _fmt_float(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise ValueError("non-finite number in report")
    if x == 0.0:
        return "0"
    return format(x, ".12g")


def dumps_canonical(obj) -> str:
    """Compact JSON with floats at 12 significant digits; stable under parse/re-serialize."""
    parts: list[str] = []
    _write(obj, parts)
    return "".join(parts)


def _write(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(int(obj)))
    elif isinstance(obj, float):
        out.append(_fmt_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _write(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        if obj and all(type(v) is float for v in obj):
            out.append("[" + ",".join(map(_fmt_float, obj)) + "]")
            return
        if obj and all(type(v) is int for v in obj):
            out.append("[" + ",".join(map(str, obj)) + "]")
            return
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _write(v, out)
        out.append("]")
    elif isinstance(obj, np.generic):
        _write(obj.item(), out)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_report_json(report, path: str | Path) -> None:
    """Canonical report plus a trailing non-canonical ``timing`` block."""
    body = report.canonical_dict()
    body["timing"] = {k: float(v) for k, v in sorted(report.timing.items())}
    body["timing"]["workers"] = report.workers
    Path(path).write_text(dumps_canonical(body) + "\n", encoding="utf-8")


def format_windows_csv(offsets, columns: dict) -> str:
    """CSV with CSV_COLUMNS; ``columns`` maps each stat name to a sequence."""
    cols = [list(offsets)] + [list(columns[c]) for c in STAT_COLUMNS]
    lines = [",".join(CSV_COLUMNS)]
    for row in zip(*cols):
        lines.append(str(int(row[0])) + "," + ",".join(_fmt_float(float(v)) for v in row[1:]))
    return "\n".join(lines) + "\n"


def windows_csv(report) -> str:
    return format_windows_csv(report.offsets.tolist(), {c: report.column(c).tolist() for c in STAT_COLUMNS})


def windows_csv_from_json(doc: dict) -> str:
    """Same CSV, rebuilt from a parsed report.json (e.g. one returned by the service)."""
    w = doc["windows"]
    return format_windows_csv(w["offset"], w)


def write_windows_csv(report, path: str | Path) -> None:
    Path(path).write_text(windows_csv(report), encoding="utf-8")


# -- images ------------------------------------------------------------------


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_pnm(blob: bytes) -> np.ndarray:
    """Read back a binary P5/P6 image as produced by encode_pgm/encode_ppm."""
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError("unsupported pixmap")
    arr = np.frombuffer(rest, dtype=np.uint8)
    return arr.reshape(h, w) if magic == b"P5" else arr.reshape(h, w, 3)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write .pgm/.ppm directly; other extensions (e.g. .png) go through Pillow."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        blob = encode_pgm(pixels) if pixels.ndim == 2 else encode_ppm(pixels)
        path.write_bytes(blob)
        return
    try:
        from PIL import Image
    except ImportError as exc:
        raise RuntimeError(f"writing {suffix} images needs Pillow (pip install 'artifact[png]')") from exc
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path)


def _colormap(t: np.ndarray) -> np.ndarray:
    """Linear blue -> red ramp over t in [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    rgb = np.empty(t.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.rint(255 * t)
    rgb[..., 1] = 0
    rgb[..., 2] = np.rint(255 * (1.0 - t))
    return rgb


def render_heatmap(series, width: int = 256, value_range: tuple[float, float] | None = None) -> np.ndarray:
    """Row-major strip image of a metric series; one pixel per window."""
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty series")
    if width < 1:
        raise ValueError("width must be positive")
    if value_range is None:
        metric = getattr(series, "metric", "shannon")
        value_range = METRIC_RANGES.get(metric, (float(values.min()), float(values.max())))
    lo, hi = value_range
    span = hi - lo if hi > lo else 1.0
    rows = -(-values.size // width)
    grid = np.zeros(rows * width)
    grid[: values.size] = (values - lo) / span
    rgb = _colormap(grid.reshape(rows, width))
    if values.size % width:
        rgb.reshape(-1, 3)[values.size :] = 0
    return rgb


def render_byteplot(data, width: int = 256) -> np.ndarray:
    """One gray pixel per byte, row-major: 0x00 black, 0xFF white."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if arr.size == 0:
        raise ValueError("empty dump")
    rows = -(-arr.size // width)
    out = np.zeros(rows * width, dtype=np.uint8)
    out[: arr.size] = arr
    return out.reshape(rows, width)


def hilbert_order(d: int, order: int) -> tuple[int, int]:
    """Cell (x, y) visited at step ``d`` of the order-``order`` Hilbert curve."""
    n = 1 << order
    if not 0 <= d < n * n:
        raise ValueError(f"index {d} outside curve of order {order}")
    x = y = 0
    t = d
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x, y = s - 1 - x, s - 1 - y
            x, y = y, x
        x += s * rx
        y += s * ry
        t //= 4
        s *= 2
    return x, y


def hilbert_coords(order: int) -> np.ndarray:
    """(4**order, 2) array of cells in curve order, vectorized."""
    n = 1 << order
    t = np.arange(n * n, dtype=np.int64)
    x = np.zeros_like(t)
    y = np.zeros_like(t)
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x = x + s * rx
        y = y + s * ry
        t //= 4
        s *= 2
    return np.column_stack([x, y])


def render_hilbert(data, order: int = 8) -> np.ndarray:
    """Lay bytes along a Hilbert curve; inputs longer than 4**order are averaged into cells."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if arr.size == 0:
        raise ValueError("empty dump")
    cells = 1 << (2 * order)
    per = max(1, math.ceil(arr.size / cells))
    padded = np.zeros(per * cells, dtype=np.float64)
    padded[: arr.size] = arr
    values = np.rint(padded.reshape(cells, per).mean(axis=1)).astype(np.uint8)
    xy = hilbert_coords(order)
    img = np.zeros((1 << order, 1 << order), dtype=np.uint8)
    img[xy[:, 1], xy[:, 0]] = values
    return img
