"""Interval-box window classification, region segmentation and the low-entropy block filter."""
from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .disasm import valid_byte_ratio_batch
from .dump import DumpError, MemoryDump, WindowConfig, byte_histogram
from .stats import METRIC_RANGES, STAT_COLUMNS, _row_entropy_sorted, matrix_table, shannon_entropy

FEATURE_VERSION = "fv1"
FEATURE_NAMES = STAT_COLUMNS + ("kernel_pointer_density", "valid_byte_ratio")


class RegionLabel(str, enum.Enum):
    ZERO = "Zero"
    TEXT = "Text"
    CODE = "Code"
    HEADER = "Header"
    PACKED = "Packed"
    ENCRYPTED = "Encrypted"
    UNKNOWN = "Unknown"


LABELS = tuple(RegionLabel)
LABEL_INDEX = {lab: i for i, lab in enumerate(LABELS)}
UNKNOWN_INDEX = LABEL_INDEX[RegionLabel.UNKNOWN]
DEFAULT_PRIORITY = (
    RegionLabel.ZERO,
    RegionLabel.HEADER,
    RegionLabel.TEXT,
    RegionLabel.CODE,
    RegionLabel.PACKED,
    RegionLabel.ENCRYPTED,
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    version: str = FEATURE_VERSION

    def __post_init__(self) -> None:
        if len(self.values) != len(FEATURE_NAMES):
            raise ModelError(f"feature vector needs {len(FEATURE_NAMES)} values")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


def feature_ranges(window_len: int) -> np.ndarray:
    """Nominal (lo, hi) of every feature, used to size degenerate intervals."""
    rng = dict(METRIC_RANGES)
    rng["chi2"] = (0.0, 255.0 * window_len)
    rng["kernel_pointer_density"] = (0.0, 1.0)
    rng["valid_byte_ratio"] = (0.0, 1.0)
    return np.array([rng[name] for name in FEATURE_NAMES], dtype=np.float64)


def kernel_pointer_density_batch(mat: np.ndarray) -> np.ndarray:
    count = mat.shape[1] // 4
    if count == 0:
        raise DumpError("window shorter than a pointer")
    high = mat[:, 3 : 4 * count : 4] >= 0x80
    return np.count_nonzero(high, axis=1) / count


def valid_ratio_batch(mat: np.ndarray, constant: np.ndarray | None = None) -> np.ndarray:
    """Valid-byte ratios, sweeping single-valued rows once per distinct value."""
    if constant is None:
        constant = mat.min(axis=1) == mat.max(axis=1)
    out = np.empty(mat.shape[0])
    varied = np.flatnonzero(~constant)
    if varied.size:
        out[varied] = valid_byte_ratio_batch(mat[varied])
    flat = np.flatnonzero(constant)
    if flat.size:
        values = mat[flat, 0]
        distinct = np.unique(values)
        ratios = valid_byte_ratio_batch(np.repeat(distinct[:, None], mat.shape[1], axis=1).astype(np.uint8))
        out[flat] = ratios[np.searchsorted(distinct, values)]
    return out


def feature_matrix(mat: np.ndarray) -> np.ndarray:
    """(rows, len(FEATURE_NAMES)) features for each row of a window matrix."""
    table = matrix_table(mat, np.zeros(mat.shape[0], dtype=np.int64))
    return features_from_table(table, mat)


def features_from_table(table, mat: np.ndarray) -> np.ndarray:
    cols = [table.column(name) for name in STAT_COLUMNS]
    cols.append(kernel_pointer_density_batch(mat))
    cols.append(valid_ratio_batch(mat, table.degenerate))
    return np.column_stack(cols).astype(np.float64)


def extract_features(dump: MemoryDump, offset: int, window_len: int) -> FeatureVector:
    if offset < 0 or offset + window_len > len(dump):
        raise DumpError(f"window [{offset}, {offset + window_len}) outside dump of length {len(dump)}")
    mat = dump.array[offset : offset + window_len][None, :]
    return FeatureVector(tuple(float(v) for v in feature_matrix(mat)[0]))


@dataclass(frozen=True)
class ClassifierModel:
    """Per-class feature intervals, consulted in priority order."""

    intervals: dict[RegionLabel, np.ndarray]
    priority: tuple[RegionLabel, ...] = DEFAULT_PRIORITY
    k: float = 3.0
    version: str = FEATURE_VERSION

    def __post_init__(self) -> None:
        for lab, box in self.intervals.items():
            if box.shape != (len(FEATURE_NAMES), 2):
                raise ModelError(f"{lab.value}: every feature needs an interval")
            if not np.isfinite(box).all() or (box[:, 0] > box[:, 1]).any():
                raise ModelError(f"{lab.value}: intervals must be finite with lo <= hi")
            if lab not in self.priority:
                raise ModelError(f"{lab.value}: missing from priority order")

    @property
    def classes(self) -> list[RegionLabel]:
        return [lab for lab in self.priority if lab in self.intervals]

    def interval(self, label: RegionLabel, feature: str) -> tuple[float, float]:
        lo, hi = self.intervals[label][FEATURE_NAMES.index(feature)]
        return float(lo), float(hi)


def calibrate(
    samples,
    k: float = 3.0,
    min_samples: int = 20,
    priority: tuple[RegionLabel, ...] = DEFAULT_PRIORITY,
) -> ClassifierModel:
    """Learn mean +/- k*stddev boxes from labelled byte windows.

    Zero-variance features get +/- 1% of the feature's nominal range instead.
    """
    grouped: dict[RegionLabel, list[bytes]] = {}
    for data, label in samples:
        grouped.setdefault(RegionLabel(label), []).append(bytes(data))
    if not grouped:
        raise ModelError("empty calibration corpus")
    intervals = {}
    for label, windows in grouped.items():
        if len(windows) < min_samples:
            raise ModelError(f"class {label.value} has {len(windows)} samples, need {min_samples}")
        lengths = {len(w) for w in windows}
        if len(lengths) != 1:
            raise ModelError(f"class {label.value}: samples must share one window length")
        n = lengths.pop()
        mat = np.frombuffer(b"".join(windows), dtype=np.uint8).reshape(len(windows), n)
        feats = feature_matrix(mat)
        mean = feats.mean(axis=0)
        sd = feats.std(axis=0)
        eps = 0.01 * np.diff(feature_ranges(n), axis=1)[:, 0]
        half = np.where(sd > 0, k * sd, eps)
        intervals[label] = np.column_stack([mean - half, mean + half])
    return ClassifierModel(intervals, tuple(priority), k)


def classify_batch(model: ClassifierModel, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label index (into LABELS) and confidence for each feature row."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != len(FEATURE_NAMES):
        raise ModelError(f"expected {len(FEATURE_NAMES)} features, got {feats.shape[1]}")
    rows = feats.shape[0]
    labels = np.full(rows, UNKNOWN_INDEX, dtype=np.int8)
    conf = np.zeros(rows)
    open_ = np.ones(rows, dtype=bool)
    for lab in model.classes:
        box = model.intervals[lab]
        lo, hi = box[:, 0], box[:, 1]
        inside = open_ & ((feats >= lo) & (feats <= hi)).all(axis=1)
        if inside.any():
            q = (hi - lo) / 4.0
            mid = (feats[inside] > lo + q) & (feats[inside] < hi - q)
            labels[inside] = LABEL_INDEX[lab]
            conf[inside] = mid.mean(axis=1)
            open_ &= ~inside
    return labels, conf


def classify_window(model: ClassifierModel, fv: FeatureVector) -> tuple[RegionLabel, float]:
    if fv.version != model.version:
        raise ModelError(f"feature version {fv.version} does not match model {model.version}")
    labels, conf = classify_batch(model, np.array([fv.values]))
    return LABELS[labels[0]], float(conf[0])


# -- model files -------------------------------------------------------------

MODEL_MAGIC = "memsieve-model"


def model_to_text(model: ClassifierModel) -> str:
    lines = [
        f"{MODEL_MAGIC} {model.version} k={model.k!r} priority={','.join(p.value for p in model.priority)}",
        "# class feature lo hi",
    ]
    for lab in model.classes:
        for name, (lo, hi) in zip(FEATURE_NAMES, model.intervals[lab]):
            lines.append(f"{lab.value} {name} {float(lo)!r} {float(hi)!r}")
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> ClassifierModel:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ModelError("empty model file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != MODEL_MAGIC:
        raise ModelError("missing model header line")
    version = head[1]
    if version != FEATURE_VERSION:
        raise ModelError(f"unsupported feature version {version}")
    opts = dict(h.split("=", 1) for h in head[2:])
    try:
        k = float(opts["k"])
        priority = tuple(RegionLabel(p) for p in opts["priority"].split(","))
    except (KeyError, ValueError) as exc:
        raise ModelError(f"bad model header: {exc}") from exc
    boxes: dict[RegionLabel, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != 4:
            raise ModelError(f"model line {lineno}: expected 'class feature lo hi'")
        try:
            lab = RegionLabel(parts[0])
            col = FEATURE_NAMES.index(parts[1])
            lo, hi = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise ModelError(f"model line {lineno}: {exc}") from exc
        box = boxes.setdefault(lab, np.full((len(FEATURE_NAMES), 2), np.nan))
        box[col] = (lo, hi)
    for lab, box in boxes.items():
        if np.isnan(box).any():
            raise ModelError(f"class {lab.value} does not bound every feature")
    return ClassifierModel(boxes, priority, k, version)


def load_model(path: str | Path) -> ClassifierModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def save_model(model: ClassifierModel, path: str | Path) -> None:
    Path(path).write_text(model_to_text(model), encoding="utf-8")


_DEFAULT_MODEL: ClassifierModel | None = None


def default_model() -> ClassifierModel:
    global _DEFAULT_MODEL
    if _DEFAULT_MODEL is None:
        text = resources.files("memsieve").joinpath("data/default_model.txt").read_text()
        _DEFAULT_MODEL = parse_model(text)
    return _DEFAULT_MODEL


# -- regions -----------------------------------------------------------------


@dataclass
class RegionVerdict:
    start: int
    length: int
    label: RegionLabel
    confidence: float
    evidence: list[tuple[str, float]] = field(default_factory=list)
    hidden: bool | None = None

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class WindowVerdict:
    offset: int
    label: RegionLabel
    confidence: float = 1.0


def _absorb_short_runs(labels: list, counts: list, min_run: int) -> tuple[list, list]:
    """Fold runs shorter than min_run into their neighbours.

    A short run between two runs of one label is merged with both first.
    Otherwise the shortest run (leftmost on ties) joins its longer
    neighbour, the left one on ties.
    """
    n = len(labels)
    lab, cnt = list(labels), list(counts)
    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    nxt[-1] = -1
    ver = [0] * n
    alive = n

    def key(i):
        p, q = prev[i], nxt[i]
        sandwiched = p >= 0 and q >= 0 and lab[p] == lab[q]
        return (0 if sandwiched else 1, cnt[i], i, ver[i])

    heap = [key(i) for i in range(n) if cnt[i] < min_run]
    heapq.heapify(heap)

    def unlink(i):
        p, q = prev[i], nxt[i]
        if p >= 0:
            nxt[p] = q
        if q >= 0:
            prev[q] = p
        ver[i] = -1

    while heap and alive > 1:
        *_, i, v = heapq.heappop(heap)
        if ver[i] != v or cnt[i] >= min_run:
            continue
        p, q = prev[i], nxt[i]
        if p >= 0 and q >= 0 and lab[p] == lab[q]:
            cnt[p] += cnt[i] + cnt[q]
            unlink(i)
            unlink(q)
            alive -= 2
            target = p
        else:
            target = q if p < 0 or (q >= 0 and cnt[q] > cnt[p]) else p
            cnt[target] += cnt[i]
            unlink(i)
            alive -= 1
        for j in (prev[target], target, nxt[target]):
            if j >= 0:
                ver[j] += 1
                if cnt[j] < min_run:
                    heapq.heappush(heap, key(j))
    out_l, out_c = [], []
    i = next((k for k in range(n) if ver[k] >= 0 and prev[k] < 0), -1)
    while i >= 0:
        out_l.append(lab[i])
        out_c.append(cnt[i])
        i = nxt[i]
    return out_l, out_c


def segment_runs(labels: np.ndarray, min_run: int = 2) -> list[tuple[int, int, int]]:
    """Run-length segmentation of window labels as (first, count, label) triples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    if min_run < 1:
        raise ValueError("min_run must be >= 1")
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], cuts))
    counts = np.diff(np.append(starts, labels.size))
    run_labels = [int(v) for v in labels[starts]]
    run_labels, run_counts = _absorb_short_runs(run_labels, [int(c) for c in counts], min_run)
    out = []
    pos = 0
    for lab, c in zip(run_labels, run_counts):
        out.append((pos, c, lab))
        pos += c
    return out


def runs_to_regions(
    runs,
    offsets: np.ndarray,
    stride: int,
    span_end: int,
    confidences: np.ndarray,
    feats: np.ndarray | None = None,
) -> list[RegionVerdict]:
    """Turn window runs into byte regions that partition the windowed span.

    Window i owns [offset_i, offset_i + stride); the last window owns up to
    ``span_end``.
    """
    out = []
    total = len(offsets)
    for first, count, lab in runs:
        start = int(offsets[first])
        last = first + count
        end = span_end if last == total else int(offsets[last - 1]) + stride
        conf = float(confidences[first:last].mean())
        evidence = []
        if feats is not None:
            means = feats[first:last].mean(axis=0)
            evidence = [(name, float(v)) for name, v in zip(FEATURE_NAMES, means)]
        out.append(RegionVerdict(start, end - start, LABELS[lab], conf, evidence))
    return out


def segment_regions(verdicts, min_run: int = 2, cfg: WindowConfig | None = None) -> list[RegionVerdict]:
    """Merge per-window verdicts into labelled regions.

    ``verdicts`` are WindowVerdicts in offset order; adjacent equal labels merge
    and runs shorter than ``min_run`` windows take the label of their longer
    neighbour.
    """
    verdicts = list(verdicts)
    if not verdicts:
        return []
    cfg = cfg or WindowConfig()
    offsets = np.array([v.offset for v in verdicts], dtype=np.int64)
    if (np.diff(offsets) <= 0).any():
        raise ValueError("verdicts must be sorted by offset")
    labels = np.array([LABEL_INDEX[RegionLabel(v.label)] for v in verdicts])
    conf = np.array([v.confidence for v in verdicts], dtype=np.float64)
    runs = segment_runs(labels, min_run)
    return runs_to_regions(runs, offsets, cfg.stride, int(offsets[-1]) + cfg.window_len, conf)


# -- low-entropy block filter ------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    sub_window: int = 64
    concentration_threshold: float = 0.9
    entropy_threshold: float = 1.0
    alphabet_share: float = 0.05
    refine_edges: bool = True

    def __post_init__(self) -> None:
        if self.sub_window < 2:
            raise ValueError("sub_window must be at least 2")
        if not 0.0 < self.concentration_threshold <= 1.0:
            raise ValueError("concentration_threshold must lie in (0, 1]")


_FLAG_CHUNK = 65536


def _flag_rows(rows: np.ndarray, cfg: FilterConfig) -> np.ndarray:
    m = rows.shape[1]
    flags = rows.min(axis=1) == rows.max(axis=1)
    varied = np.flatnonzero(~flags)
    pos = np.arange(m)
    for s in range(0, varied.size, _FLAG_CHUNK):
        idx = varied[s : s + _FLAG_CHUNK]
        srt = np.sort(rows[idx], axis=1)
        starts = np.zeros(srt.shape, dtype=np.int64)
        starts[:, 1:] = np.where(srt[:, 1:] != srt[:, :-1], pos[1:], 0)
        top = (pos - np.maximum.accumulate(starts, axis=1) + 1).max(axis=1)
        ent = _row_entropy_sorted(srt)
        flags[idx] = (top >= cfg.concentration_threshold * m) | (ent <= cfg.entropy_threshold)
    return flags


def _flag_spans(arr: np.ndarray, cfg: FilterConfig) -> list[tuple[int, int]]:
    sw = cfg.sub_window
    n = arr.size
    full = n // sw
    flags = np.zeros(full + 1, dtype=bool)
    if full:
        flags[:full] = _flag_rows(arr[: full * sw].reshape(full, sw), cfg)
    tail = n - full * sw
    if tail >= max(2, sw // 4):
        flags[full] = _flag_rows(arr[full * sw :][None, :], cfg)[0]
    padded = np.concatenate(([False], flags, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a) * sw, min(int(b) * sw, n)) for a, b in zip(edges[0::2], edges[1::2])]


def _scan_in(lut: np.ndarray, arr: np.ndarray, pos: int, step: int, limit: int) -> int:
    """Walk from ``pos`` in direction ``step`` while bytes are in ``lut``; return stop index."""
    chunk = 4096
    while pos != limit:
        if step > 0:
            seg = arr[pos : min(limit, pos + chunk)]
        else:
            seg = arr[max(limit, pos - chunk) : pos][::-1]
        miss = np.flatnonzero(~lut[seg])
        if miss.size:
            return pos + step * int(miss[0])
        pos += step * seg.size
    return pos


def _refine(arr: np.ndarray, spans, cfg: FilterConfig) -> list[tuple[int, int]]:
    n = arr.size
    out = []
    for a, b in spans:
        counts = np.bincount(arr[a:b], minlength=256)
        lut = counts >= cfg.alphabet_share * (b - a)
        inner = np.flatnonzero(lut[arr[a:b]])
        if inner.size == 0:
            continue
        a, b = a + int(inner[0]), a + int(inner[-1]) + 1
        a = _scan_in(lut, arr, a, -1, 0)
        b = _scan_in(lut, arr, b, 1, n)
        out.append((a, b))
    out.sort()
    merged: list[list[int]] = []
    for a, b in out:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def _single_pass(arr: np.ndarray, cfg: FilterConfig) -> list[tuple[int, int]]:
    spans = _flag_spans(arr, cfg)
    if cfg.refine_edges and spans:
        spans = _refine(arr, spans, cfg)
    return spans


def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.uint8, copy=False).ravel()
    return np.frombuffer(bytes(data), dtype=np.uint8)


def kept_segments(n: int, excised) -> list[tuple[int, int]]:
    """Complement of sorted, disjoint (start, length) spans within [0, n)."""
    out = []
    pos = 0
    for s, length in excised:
        if s > pos:
            out.append((pos, s - pos))
        pos = s + length
    if pos < n:
        out.append((pos, n - pos))
    return out


def _to_original(spans, segments) -> list[tuple[int, int]]:
    """Map [a, b) spans of the concatenated kept bytes back to original offsets."""
    seg_start = np.array([s for s, _ in segments], dtype=np.int64)
    seg_len = np.array([ln for _, ln in segments], dtype=np.int64)
    cum = np.concatenate(([0], np.cumsum(seg_len)))
    out = []
    for a, b in spans:
        i = int(np.searchsorted(cum, a, side="right")) - 1
        while a < b:
            take = min(b, int(cum[i + 1])) - a
            out.append((int(seg_start[i] + a - cum[i]), take))
            a += take
            i += 1
    return out


def _merge_spans(spans) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for s, length in sorted(spans):
        if merged and s <= merged[-1][0] + merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], s + length - merged[-1][0])
        else:
            merged.append([s, length])
    return [(s, ln) for s, ln in merged]


def excise_spans(data, cfg: FilterConfig = FilterConfig()) -> list[tuple[int, int]]:
    """Excised (start, length) spans, iterated until the kept bytes are stable."""
    arr = _as_u8(data)
    if arr.size == 0:
        raise DumpError("empty input")
    excised: list[tuple[int, int]] = []
    current = arr
    segments = [(0, arr.size)]
    while current.size:
        spans = _single_pass(current, cfg)
        if not spans:
            break
        excised = _merge_spans(excised + _to_original(spans, segments))
        segments = kept_segments(arr.size, excised)
        current = np.concatenate([arr[s : s + ln] for s, ln in segments]) if segments else arr[:0]
    return excised


def evasion_filter(data, sub_window: int = 64, concentration_threshold: float = 0.9, **kw) -> tuple[bytes, list[tuple[int, int]]]:
    """Remove runs of low-entropy sub-windows; return kept bytes and excised spans.

    A sub-window is flagged when its most common byte covers at least
    ``concentration_threshold`` of it or its Shannon entropy is at most
    ``entropy_threshold`` bits. Flagged runs are trimmed or grown to the
    extent of the run's dominant byte values. The procedure repeats on its
    own output until nothing more is removed, so a second call is a no-op.
    """
    cfg = FilterConfig(sub_window, concentration_threshold, **kw)
    arr = _as_u8(data)
    spans = excise_spans(arr, cfg)
    segs = kept_segments(arr.size, spans)
    kept = b"".join(arr[s : s + ln].tobytes() for s, ln in segs)
    return kept, spans


def robust_entropy(data, **kw) -> tuple[float, float, float]:
    """(raw Shannon, Shannon after filtering, excised fraction)."""
    arr = _as_u8(data)
    if arr.size == 0:
        raise DumpError("empty input")
    raw = shannon_entropy(byte_histogram(arr))
    kept, spans = evasion_filter(arr, **kw)
    filtered = shannon_entropy(byte_histogram(kept)) if kept else 0.0
    frac = sum(ln for _, ln in spans) / arr.size
    return raw, filtered, frac

