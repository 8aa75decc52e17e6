"""Tiled, worker-count-invariant scan pipeline with cross-view verdicts and benchmarking."""
from __future__ import annotations

import csv
import hashlib
import io
import multiprocessing as mp
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import TOOLKIT
from .classify import (
    FEATURE_NAMES,
    LABEL_INDEX,
    LABELS,
    UNKNOWN_INDEX,
    ClassifierModel,
    FilterConfig,
    RegionLabel,
    RegionVerdict,
    classify_batch,
    default_model,
    excise_spans,
    features_from_table,
    kept_segments,
    load_model,
    runs_to_regions,
    segment_runs,
)
from .dump import MemoryDump, RegionManifest, WindowConfig, window_matrix
from .signatures import SignatureSet, compile_signatures, default_signatures, load_signatures, pe_header_scan
from .stats import STAT_COLUMNS, matrix_table

ANALYSES = ("stats", "signatures", "disasm", "classify", "filtered", "crossview")
_REQUIRES = {
    "classify": {"stats", "disasm"},
    "filtered": {"classify"},
    "crossview": {"classify"},
}
MODES = ("full", "baseline")


class PipelineError(RuntimeError):
    """Stage failure; ``tile`` names the failing tile and ``completed`` the finished ones."""

    def __init__(self, message: str, tile: int | None = None, completed: list[int] | None = None) -> None:
        super().__init__(message)
        self.tile = tile
        self.completed = completed or []


def resolve_analyses(requested) -> frozenset[str]:
    todo = set(requested) | {"stats"}
    unknown = todo - set(ANALYSES)
    if unknown:
        raise ValueError(f"unknown analyses: {', '.join(sorted(unknown))}")
    changed = True
    while changed:
        changed = False
        for a in list(todo):
            extra = _REQUIRES.get(a, set()) - todo
            if extra:
                todo |= extra
                changed = True
    return frozenset(todo)


@dataclass(frozen=True)
class ScanConfig:
    window_len: int = 256
    stride: int = 252
    analyses: frozenset[str] = frozenset(ANALYSES)
    mode: str = "full"
    min_run: int = 2
    confidence_threshold: float = 0.5
    min_hidden_len: int = 0  # 0 means two windows
    sub_window: int = 64
    concentration_threshold: float = 0.9
    entropy_threshold: float = 1.0
    max_gap: int = 65536
    model_path: str = ""
    signatures_path: str = ""
    tiles_per_worker: int = 1
    tile_timeout: float = 600.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "analyses", resolve_analyses(self.analyses))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        WindowConfig(self.window_len, self.stride)
        if self.min_run < 1 or self.tiles_per_worker < 1:
            raise ValueError("min_run and tiles_per_worker must be >= 1")

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.window_len, self.stride)

    @property
    def hidden_floor(self) -> int:
        return self.min_hidden_len or 2 * self.window_len

    @property
    def filter(self) -> FilterConfig:
        return FilterConfig(self.sub_window, self.concentration_threshold, self.entropy_threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["analyses"] = sorted(self.analyses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "analyses" in d:
            a = d["analyses"]
            d["analyses"] = frozenset(a.split(",") if isinstance(a, str) else a)
        return cls(**d)


# -- tile planning -----------------------------------------------------------


@dataclass(frozen=True)
class Tile:
    index: int
    input_start: int
    input_len: int
    first_window: int
    window_count: int
    sig_start: int
    sig_end: int


@dataclass(frozen=True)
class TilePlan:
    tiles: tuple[Tile, ...]
    cfg: WindowConfig
    workers: int
    dump_len: int
    sig_margin: int = 0


def plan_tiles(dump_len: int, cfg: WindowConfig, workers: int, sig_margin: int = 0, tiles_per_worker: int = 1) -> TilePlan:
    """Split window ownership into contiguous, balanced tiles.

    Tile inputs overlap by ``window_len - stride`` bytes. Signature ownership
    follows window ownership (the last tile keeps the tail bytes), and
    signature reads run ``sig_margin`` bytes past the owned end.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    total = cfg.window_count(dump_len)
    count = max(1, min(total, workers * tiles_per_worker))
    base, extra = divmod(total, count)
    tiles = []
    first = 0
    for i in range(count):
        n = base + (1 if i < extra else 0)
        start = first * cfg.stride
        length = (n - 1) * cfg.stride + cfg.window_len
        sig_end = dump_len if i == count - 1 else (first + n) * cfg.stride
        tiles.append(Tile(i, start, length, first, n, start, sig_end))
        first += n
    return TilePlan(tuple(tiles), cfg, workers, dump_len, sig_margin)


# -- worker side -------------------------------------------------------------

_STATE: dict = {}  # per worker process, filled by _init_worker


def _make_state(data: bytes, cfg: ScanConfig, model: ClassifierModel, sigs: SignatureSet) -> dict:
    return {"data": data, "arr": np.frombuffer(data, dtype=np.uint8), "cfg": cfg, "model": model, "sigs": sigs}


def _init_worker(data: bytes, cfg, model, sigs) -> None:
    # under fork the arguments are inherited, not pickled
    _STATE.update(_make_state(data, cfg, model, sigs))


def baseline_labels(model: ClassifierModel, shannon: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw-entropy threshold detector: Code iff Shannon lies in the model's Code interval."""
    lo, hi = model.interval(RegionLabel.CODE, "shannon")
    labels = np.full(shannon.shape, UNKNOWN_INDEX, dtype=np.int8)
    labels[shannon == 0.0] = LABEL_INDEX[RegionLabel.ZERO]
    labels[(shannon >= lo) & (shannon <= hi)] = LABEL_INDEX[RegionLabel.CODE]
    return labels, (labels != UNKNOWN_INDEX).astype(np.float64)


def _window_features(mat: np.ndarray, analyses, timing: dict) -> np.ndarray:
    t = time.perf_counter()
    table = matrix_table(mat, np.zeros(mat.shape[0], dtype=np.int64))
    timing["stats"] = time.perf_counter() - t
    if "disasm" not in analyses:
        return np.column_stack([table.column(c) for c in STAT_COLUMNS])
    t = time.perf_counter()
    feats = features_from_table(table, mat)
    timing["disasm"] = time.perf_counter() - t
    return feats


def _run_tile(tile: Tile, state: dict | None = None) -> dict:
    state = _STATE if state is None else state
    arr, cfg = state["arr"], state["cfg"]
    analyses = cfg.analyses
    timing: dict[str, float] = {}
    out: dict = {"index": tile.index, "timing": timing}
    mat = window_matrix(arr, cfg.window)[tile.first_window : tile.first_window + tile.window_count]
    feats = _window_features(mat, analyses, timing)
    out["features"] = feats
    if "signatures" in analyses:
        t = time.perf_counter()
        hits = state["sigs"].scan_range(state["data"], tile.sig_start, tile.sig_end)
        out["matches"] = [(m.offset, m.signature_id, m.matched_len) for m in hits]
        timing["signatures"] = time.perf_counter() - t
    if "classify" in analyses:
        t = time.perf_counter()
        if cfg.mode == "baseline":
            labels, conf = baseline_labels(state["model"], feats[:, 0])
        else:
            labels, conf = classify_batch(state["model"], feats)
        out["labels"], out["confidence"] = labels, conf
        timing["classify"] = time.perf_counter() - t
    return out


def _fork_context():
    try:
        return mp.get_context("fork")
    except ValueError:
        return None


def _execute(plan: TilePlan, data: bytes, cfg: ScanConfig, model, sigs) -> list[dict]:
    results: list[dict] = []
    if plan.workers == 1:
        state = _make_state(data, cfg, model, sigs)
        for tile in plan.tiles:
            try:
                results.append(_run_tile(tile, state))
            except Exception as exc:
                raise PipelineError(f"tile {tile.index} failed: {exc}", tile.index, [r["index"] for r in results]) from exc
        return results
    ctx = _fork_context() or mp.get_context()
    with ProcessPoolExecutor(plan.workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(data, cfg, model, sigs)) as pool:
        todo = iter(plan.tiles)
        pending: deque = deque()

        def submit() -> None:
            tile = next(todo, None)
            if tile is not None:
                pending.append((tile.index, pool.submit(_run_tile, tile)))

        for _ in range(2 * plan.workers):
            submit()
        while pending:
            idx, fut = pending.popleft()
            try:
                results.append(fut.result(timeout=cfg.tile_timeout))
            except FutureTimeout as exc:
                for _, f in pending:
                    f.cancel()
                raise PipelineError(f"tile {idx} timed out after {cfg.tile_timeout}s", idx,
                                    [r["index"] for r in results]) from exc
            except Exception as exc:
                for _, f in pending:
                    f.cancel()
                raise PipelineError(f"tile {idx} failed: {exc}", idx, [r["index"] for r in results]) from exc
            submit()
    return results


# -- filtered view -----------------------------------------------------------


def _clusters(segments, max_gap: int) -> list[list[tuple[int, int]]]:
    out: list[list[tuple[int, int]]] = []
    for seg in segments:
        if out:
            ps, pl = out[-1][-1]
            if seg[0] - (ps + pl) <= max_gap:
                out[-1].append(seg)
                continue
        out.append([seg])
    return out


def filtered_regions(arr: np.ndarray, cfg: ScanConfig, model: ClassifierModel) -> tuple[list[RegionVerdict], list[tuple[int, int]]]:
    """Classify the dump with low-entropy blocks cut out, mapped back to dump offsets.

    Kept bytes are grouped into clusters (excised gaps up to ``max_gap``).
    Clusters that had bytes cut from their interior are re-windowed as one
    contiguous stream; resulting code-like runs that span at least one cut
    are returned in original coordinates.
    """
    spans = excise_spans(arr, cfg.filter)
    out: list[RegionVerdict] = []
    if not spans:
        return out, spans
    wcfg = cfg.window
    for cluster in _clusters(kept_segments(arr.size, spans), cfg.max_gap):
        if len(cluster) < 2:
            continue
        stream = np.concatenate([arr[s : s + n] for s, n in cluster])
        if stream.size < wcfg.window_len:
            continue
        mat = window_matrix(stream, wcfg)
        feats = features_from_table(matrix_table(mat, np.zeros(len(mat), dtype=np.int64)), mat)
        labels, conf = classify_batch(model, feats)
        offsets = np.arange(len(mat), dtype=np.int64) * wcfg.stride
        runs = segment_runs(labels, cfg.min_run)
        regions = runs_to_regions(runs, offsets, wcfg.stride, wcfg.windowed_span(stream.size), conf, feats)
        seg_start = np.array([s for s, _ in cluster], dtype=np.int64)
        cum = np.concatenate(([0], np.cumsum([n for _, n in cluster])))

        def to_orig(fpos: int) -> int:
            i = int(np.searchsorted(cum, fpos, side="right")) - 1
            return int(seg_start[i] + fpos - cum[i])

        for reg in regions:
            if not _eligible(reg, cfg.confidence_threshold):
                continue
            a = to_orig(reg.start)
            b = to_orig(reg.end - 1) + 1
            if b - a == reg.length:
                continue  # no cut inside: the raw view already covers it
            reg.evidence.append(("excised_fraction", 1.0 - reg.length / (b - a)))
            out.append(RegionVerdict(a, b - a, reg.label, reg.confidence, reg.evidence))
    return out, spans


def overlay_regions(base: list[RegionVerdict], overlays: list[RegionVerdict], span_end: int) -> list[RegionVerdict]:
    """Replace the parts of ``base`` covered by ``overlays``; the result stays a partition."""
    cuts: list[RegionVerdict] = []
    for ov in sorted(overlays, key=lambda r: r.start):
        a = max(0, ov.start, cuts[-1].end if cuts else 0)
        b = min(span_end, ov.end)
        if a < b:
            cuts.append(RegionVerdict(a, b - a, ov.label, ov.confidence, ov.evidence))
    if not cuts:
        return base
    out: list[RegionVerdict] = []
    ci = 0
    for reg in base:
        pos = reg.start
        while ci < len(cuts) and cuts[ci].start < reg.end:
            cut = cuts[ci]
            if cut.start > pos:
                out.append(RegionVerdict(pos, cut.start - pos, reg.label, reg.confidence, reg.evidence))
            if cut.start >= reg.start:
                out.append(cut)
            pos = max(pos, cut.end)
            if cut.end > reg.end:
                break  # the cut runs on into the next region
            ci += 1
        if pos < reg.end:
            out.append(RegionVerdict(pos, reg.end - pos, reg.label, reg.confidence, reg.evidence))
    return out


# -- cross view --------------------------------------------------------------

_CODE_LIKE = {RegionLabel.CODE}
_OPAQUE = {RegionLabel.PACKED, RegionLabel.ENCRYPTED}


def _eligible(reg: RegionVerdict, threshold: float) -> bool:
    return reg.label in _CODE_LIKE or (reg.label in _OPAQUE and reg.confidence >= threshold)


def cross_view(
    regions,
    manifest: RegionManifest,
    dump_len: int | None = None,
    confidence_threshold: float = 0.5,
    min_hidden_len: int = 0,
) -> list[RegionVerdict]:
    """Split code-like regions into manifest-covered (hidden=False) and uncovered (hidden=True) parts.

    Uncovered parts shorter than ``min_hidden_len`` are dropped; they come from
    windows overlapping the edge of a declared image.
    """
    if dump_len is not None:
        manifest.check_bounds(dump_len)
    entries = [(e.start, e.end) for e in manifest]
    out: list[RegionVerdict] = []
    for reg in regions:
        if not _eligible(reg, confidence_threshold):
            continue
        pos = reg.start
        for a, b in entries:
            if b <= pos or a >= reg.end:
                continue
            if a > pos:
                _emit(out, reg, pos, a, True, min_hidden_len)
            lo, hi = max(a, pos), min(b, reg.end)
            _emit(out, reg, lo, hi, False, 0)
            pos = hi
        if pos < reg.end:
            _emit(out, reg, pos, reg.end, True, min_hidden_len)
    return out


def _emit(out, reg: RegionVerdict, a: int, b: int, hidden: bool, floor: int) -> None:
    if b - a <= 0 or (hidden and b - a < floor):
        return
    out.append(RegionVerdict(a, b - a, reg.label, reg.confidence, list(reg.evidence), hidden))


def coverage(verdicts, start: int, length: int) -> float:
    """Fraction of [start, start+length) covered by hidden verdicts."""
    end = start + length
    covered = 0
    for v in verdicts:
        if v.hidden:
            covered += max(0, min(end, v.end) - max(start, v.start))
    return covered / length


# -- report ------------------------------------------------------------------


@dataclass
class ScanReport:
    dump_id: str
    sha256: str
    length: int
    base_address: int
    config: dict
    columns: tuple[str, ...]
    offsets: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    confidence: np.ndarray | None = None
    matches: list[tuple[int, str, int]] = field(default_factory=list)
    pe_headers: list[dict] = field(default_factory=list)
    regions: list[RegionVerdict] = field(default_factory=list)
    cross_view: list[RegionVerdict] = field(default_factory=list)
    excised: list[tuple[int, int]] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    workers: int = 1
    toolkit: str = TOOLKIT

    @property
    def hidden(self) -> list[RegionVerdict]:
        return [v for v in self.cross_view if v.hidden]

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.columns.index(name)]

    def canonical_dict(self) -> dict:
        windows = {"count": int(len(self.offsets)), "columns": list(self.columns), "offset": self.offsets.tolist()}
        for i, name in enumerate(self.columns):
            windows[name] = self.features[:, i].tolist()
        if self.labels is not None:
            windows["label"] = [LABELS[i].value for i in self.labels.tolist()]
            windows["confidence"] = self.confidence.tolist()
        hidden = self.hidden
        return {
            "toolkit": self.toolkit,
            "dump": {
                "source_id": self.dump_id,
                "sha256": self.sha256,
                "length": self.length,
                "base_address": self.base_address,
            },
            "config": self.config,
            "summary": {
                "windows": int(len(self.offsets)),
                "matches": len(self.matches),
                "regions": len(self.regions),
                "hidden_regions": len(hidden),
                "hidden_bytes": sum(v.length for v in hidden),
                "excised_bytes": sum(n for _, n in self.excised),
            },
            "windows": windows,
            "matches": [{"offset": o, "signature": s, "length": n} for o, s, n in self.matches],
            "pe_headers": self.pe_headers,
            "regions": [_region_dict(r) for r in self.regions],
            "cross_view": [_region_dict(r) for r in self.cross_view],
        }

    def canonical_json(self) -> str:
        from .report import dumps_canonical

        return dumps_canonical(self.canonical_dict())

    def canonical_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _region_dict(r: RegionVerdict) -> dict:
    d = {
        "start": r.start,
        "length": r.length,
        "label": r.label.value,
        "confidence": r.confidence,
        "evidence": {k: v for k, v in r.evidence},
    }
    if r.hidden is not None:
        d["hidden"] = r.hidden
    return d


def _load_model(cfg: ScanConfig) -> ClassifierModel:
    return load_model(cfg.model_path) if cfg.model_path else default_model()


def _load_sigs(cfg: ScanConfig) -> SignatureSet:
    sigs = load_signatures(cfg.signatures_path) if cfg.signatures_path else default_signatures()
    return compile_signatures(sigs)


def run_scan(
    dump: MemoryDump,
    cfg: ScanConfig | None = None,
    workers: int = 1,
    manifest: RegionManifest | None = None,
    model: ClassifierModel | None = None,
) -> ScanReport:
    """stats -> signatures -> disasm features -> classify -> segment -> cross-view."""
    cfg = cfg or ScanConfig()
    wcfg = cfg.window
    wcfg.window_count(len(dump))
    analyses = cfg.analyses
    model = model or _load_model(cfg)
    sigs = _load_sigs(cfg)
    manifest = manifest or RegionManifest()
    if "crossview" in analyses:
        manifest.check_bounds(len(dump))

    t0 = time.perf_counter()
    plan = plan_tiles(len(dump), wcfg, workers, max(0, sigs.max_len - 1), cfg.tiles_per_worker)
    results = _execute(plan, dump.data, cfg, model, sigs)
    timing: dict[str, float] = {}
    for res in results:
        for stage, secs in res["timing"].items():
            timing[stage] = max(timing.get(stage, 0.0), secs)
    timing["tiles"] = time.perf_counter() - t0

    columns = STAT_COLUMNS + (FEATURE_NAMES[len(STAT_COLUMNS):] if "disasm" in analyses else ())
    report = ScanReport(
        dump_id=dump.source_id,
        sha256=dump.sha256(),
        length=len(dump),
        base_address=dump.base_address,
        config=cfg.to_dict(),
        columns=tuple(columns),
        offsets=np.arange(wcfg.window_count(len(dump)), dtype=np.int64) * wcfg.stride,
        features=np.concatenate([r["features"] for r in results]),
        workers=workers,
    )
    if "signatures" in analyses:
        t = time.perf_counter()
        report.matches = [m for r in results for m in r["matches"]]
        report.pe_headers = [
            {"offset": c.offset, "e_lfanew": c.e_lfanew, "machine": c.machine, "sections": c.section_count}
            for c in pe_header_scan(dump)
        ]
        timing["signatures"] = timing.get("signatures", 0.0) + time.perf_counter() - t
    if "classify" in analyses:
        t = time.perf_counter()
        report.labels = np.concatenate([r["labels"] for r in results])
        report.confidence = np.concatenate([r["confidence"] for r in results])
        runs = segment_runs(report.labels, cfg.min_run)
        span_end = wcfg.windowed_span(len(dump))
        feats = report.features if "disasm" in analyses else None
        report.regions = runs_to_regions(runs, report.offsets, wcfg.stride, span_end, report.confidence, feats)
        timing["segment"] = time.perf_counter() - t
        if "filtered" in analyses and cfg.mode == "full":
            t = time.perf_counter()
            overlays, report.excised = filtered_regions(dump.array, cfg, model)
            report.regions = overlay_regions(report.regions, overlays, span_end)
            timing["filtered"] = time.perf_counter() - t
    if "crossview" in analyses:
        t = time.perf_counter()
        report.cross_view = cross_view(report.regions, manifest, len(dump), cfg.confidence_threshold, cfg.hidden_floor)
        timing["crossview"] = time.perf_counter() - t
    timing["total"] = time.perf_counter() - t0
    report.timing = timing
    return report


# -- benchmark ---------------------------------------------------------------

BENCH_HEADER = ("stage", "workers", "bytes", "seconds", "mib_per_s", "speedup")


@dataclass(frozen=True)
class BenchRow:
    stage: str
    workers: int
    bytes: int
    seconds: float
    mib_per_s: float
    speedup: float


def bench(dump: MemoryDump, worker_counts, cfg: ScanConfig | None = None, repeats: int = 1) -> list[BenchRow]:
    """Throughput per stage and worker count; speedup is relative to one worker."""
    worker_counts = list(worker_counts)
    if not worker_counts:
        raise ValueError("empty worker list")
    cfg = cfg or ScanConfig(analyses=frozenset({"stats"}))
    measured: dict[int, dict[str, float]] = {}
    for w in sorted(set(worker_counts) | {1}):
        best: dict[str, float] = {}
        for _ in range(repeats):
            rep = run_scan(dump, cfg, workers=w)
            for stage, secs in rep.timing.items():
                best[stage] = min(best.get(stage, float("inf")), secs)
        measured[w] = best
    rows = []
    for w in worker_counts:
        for stage in sorted(measured[w]):
            secs = measured[w][stage]
            ref = measured[1].get(stage, secs)
            mib = len(dump) / (1 << 20) / secs if secs > 0 else float("inf")
            rows.append(BenchRow(stage, w, len(dump), secs, mib, ref / secs if secs > 0 else 1.0))
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    for r in rows:
        writer.writerow([r.stage, r.workers, r.bytes, f"{r.seconds:.6f}", f"{r.mib_per_s:.3f}", f"{r.speedup:.3f}"])
    return buf.getvalue()
