"""Memory-dump representation, window geometry, byte histograms and region manifests."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_WINDOW = 256
DEFAULT_STRIDE = 252
DEFAULT_PAGE = 4096


class DumpError(ValueError):
    """Raised for malformed dumps, windows or manifests."""


class MemoryDump:
    """Immutable flat memory image.

    The backing store is a read-only ``numpy.uint8`` array; ``data`` exposes the
    same bytes as a ``bytes`` object for regex scanning.
    """

    __slots__ = ("_arr", "_bytes", "base_address", "page_size", "source_id", "_sha")

    def __init__(
        self,
        data: bytes | bytearray | memoryview | np.ndarray,
        base_address: int = 0,
        page_size: int = DEFAULT_PAGE,
        source_id: str = "",
    ) -> None:
        if isinstance(data, np.ndarray):
            raw = np.ascontiguousarray(data, dtype=np.uint8).tobytes()
        else:
            raw = bytes(data)
        if not raw:
            raise DumpError("empty dump")
        if page_size <= 0 or page_size & (page_size - 1):
            raise DumpError(f"page_size must be a power of two, got {page_size}")
        if not 0 <= base_address < 1 << 64:
            raise DumpError("base_address must fit in 64 bits")
        arr = np.frombuffer(raw, dtype=np.uint8)
        arr.flags.writeable = False
        self._bytes = raw
        self._arr = arr
        self.base_address = int(base_address)
        self.page_size = int(page_size)
        self.source_id = source_id
        self._sha: str | None = None

    @property
    def data(self) -> bytes:
        return self._bytes

    @property
    def array(self) -> np.ndarray:
        return self._arr

    def __len__(self) -> int:
        return len(self._bytes)

    def sha256(self) -> str:
        if self._sha is None:
            self._sha = hashlib.sha256(self._bytes).hexdigest()
        return self._sha

    def __repr__(self) -> str:
        return (
            f"MemoryDump(len={len(self)}, base=0x{self.base_address:x}, "
            f"source_id={self.source_id!r})"
        )


@dataclass(frozen=True)
class WindowConfig:
    window_len: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    metrics: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.window_len < 1:
            raise DumpError("window_len must be positive")
        if not 1 <= self.stride <= self.window_len:
            raise DumpError(
                f"stride must satisfy 1 <= stride <= window_len, got {self.stride}"
            )

    @classmethod
    def tiled(cls, window_len: int = DEFAULT_WINDOW) -> "WindowConfig":
        return cls(window_len=window_len, stride=window_len)

    def window_count(self, length: int) -> int:
        if self.window_len > length:
            raise DumpError(
                f"window_len {self.window_len} exceeds dump length {length}"
            )
        return (length - self.window_len) // self.stride + 1

    def windowed_span(self, length: int) -> int:
        """End of the byte span covered by windows (tail bytes excluded)."""
        return (self.window_count(length) - 1) * self.stride + self.window_len


@dataclass(frozen=True)
class ByteHistogram:
    counts: np.ndarray
    total: int

    def __post_init__(self) -> None:
        if self.counts.shape != (256,):
            raise DumpError("histogram needs exactly 256 bins")
        if self.total <= 0:
            raise DumpError("empty histogram")
        if int(self.counts.sum()) != self.total:
            raise DumpError("histogram counts do not sum to total")

    @classmethod
    def from_counts(cls, counts) -> "ByteHistogram":
        arr = np.asarray(counts, dtype=np.int64)
        if arr.shape != (256,) or (arr < 0).any():
            raise DumpError("histogram needs 256 non-negative counts")
        return cls(arr, int(arr.sum()))

    def nonzero(self) -> np.ndarray:
        return self.counts[self.counts > 0]


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    start: int
    length: int
    kind: str

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class RegionManifest:
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.entries, key=lambda e: (e.start, e.length, e.name)))
        for e in ordered:
            if e.start < 0 or e.length <= 0:
                raise DumpError(f"manifest entry {e.name!r} has invalid bounds")
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.start < prev.end:
                raise DumpError(
                    f"manifest entries {prev.name!r} and {cur.name!r} overlap"
                )
        object.__setattr__(self, "entries", ordered)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def check_bounds(self, dump_len: int) -> None:
        for e in self.entries:
            if e.end > dump_len:
                raise DumpError(
                    f"manifest entry {e.name!r} ends at 0x{e.end:x}, past dump end 0x{dump_len:x}"
                )

    def to_text(self) -> str:
        lines = ["# name start length kind"]
        lines += [f"{e.name} 0x{e.start:x} 0x{e.length:x} {e.kind}" for e in self.entries]
        return "\n".join(lines) + "\n"


def load_dump(path: str | Path, base_address: int = 0, page_size: int = DEFAULT_PAGE) -> MemoryDump:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dump not found: {p}")
    raw = p.read_bytes()
    if not raw:
        raise DumpError("empty dump")
    return MemoryDump(raw, base_address=base_address, page_size=page_size, source_id=p.name)


def window_matrix(arr: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    """Zero-copy (count, window_len) view of all windows of ``arr``."""
    count = cfg.window_count(len(arr))
    view = sliding_window_view(arr, cfg.window_len)[:: cfg.stride]
    return view[:count]


def window_offsets(length: int, cfg: WindowConfig) -> np.ndarray:
    return np.arange(cfg.window_count(length), dtype=np.int64) * cfg.stride


def iter_windows(dump: MemoryDump, cfg: WindowConfig) -> Iterator[tuple[int, memoryview]]:
    """Yield ``(offset, view)`` for each full window; the short tail is skipped."""
    count = cfg.window_count(len(dump))
    mv = memoryview(dump.data)
    for i in range(count):
        off = i * cfg.stride
        yield off, mv[off : off + cfg.window_len]


def byte_histogram(data) -> ByteHistogram:
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if arr.size == 0:
        raise DumpError("empty view")
    counts = np.bincount(arr.ravel(), minlength=256).astype(np.int64)
    return ByteHistogram(counts, int(arr.size))


def parse_manifest(text: str) -> RegionManifest:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DumpError(f"manifest line {lineno}: expected 4 fields, got {len(parts)}")
        name, start, length, kind = parts
        try:
            entries.append(ManifestEntry(name, int(start, 16), int(length, 16), kind))
        except ValueError as exc:
            raise DumpError(f"manifest line {lineno}: bad hex field") from exc
    return RegionManifest(tuple(entries))


def load_manifest(path: str | Path) -> RegionManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))
