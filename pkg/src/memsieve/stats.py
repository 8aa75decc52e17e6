"""Per-window byte statistics.

Scalar functions take a :class:`ByteHistogram` or a byte view and are the
reference surface. :func:`window_table` computes the same quantities for many
windows at once from a ``(count, window_len)`` matrix; the pipeline uses it.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .dump import ByteHistogram, DumpError, MemoryDump, WindowConfig, byte_histogram, window_matrix

UNIFORM_FAST_ENTROPY = 2.0 - 2.0**-16
FAST_ENTROPY_SPAN = 1.0 - 2.0**-16

# table columns in windows.csv / report order
STAT_COLUMNS = (
    "shannon",
    "fast_entropy",
    "chi2",
    "hamming",
    "mean",
    "stddev",
    "kurtosis",
    "bigram",
)

METRIC_RANGES = {
    "shannon": (0.0, 8.0),
    "fast_entropy": (1.0, UNIFORM_FAST_ENTROPY),
    "fast_entropy_norm": (0.0, 1.0),
    "hamming": (0.0, 1.0),
    "mean": (0.0, 255.0),
    "stddev": (0.0, 127.5),
    "kurtosis": (-2.0, 254.0),
    "bigram": (0.0, 16.0),
    "trigram": (0.0, 24.0),
}

_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.int64)
_VALUES = np.arange(256, dtype=np.int64)
_CHUNK = 16384


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.uint8, copy=False).ravel()
    return np.frombuffer(bytes(data), dtype=np.uint8)


def _as_hist(h) -> ByteHistogram:
    return h if isinstance(h, ByteHistogram) else byte_histogram(h)


def _plogp_table(n: int) -> np.ndarray:
    """-(c/n)*log2(c/n) for c in 0..n, with the c=0 term defined as 0."""
    c = np.arange(n + 1, dtype=np.float64)
    p = c / n
    out = np.zeros(n + 1)
    out[1:] = -p[1:] * np.log2(p[1:])
    return out


def _cube_table(n: int) -> np.ndarray:
    p = np.arange(n + 1, dtype=np.float64) / n
    return p * p * p


def _bin_probs(hist: ByteHistogram) -> np.ndarray:
    return hist.counts.astype(np.float64) / hist.total


def shannon_entropy(hist: ByteHistogram) -> float:
    hist = _as_hist(hist)
    p = _bin_probs(hist)
    terms = np.zeros(256)
    nz = p > 0
    terms[nz] = -p[nz] * np.log2(p[nz])
    return float(terms.sum())


def fast_entropy(hist: ByteHistogram) -> float:
    """Sum of p*(2 - p^2) over occupied byte values, i.e. 2 - sum(p^3).

    Ranges over [1, 2 - 2**-16]: 1 for a single repeated value, the maximum
    for a uniform distribution over all 256 values.
    """
    hist = _as_hist(hist)
    p = _bin_probs(hist)
    return float(2.0 - (p * p * p).sum())


def fast_entropy_normalized(hist: ByteHistogram) -> float:
    return (fast_entropy(hist) - 1.0) / FAST_ENTROPY_SPAN


def chi_square(hist: ByteHistogram) -> float:
    hist = _as_hist(hist)
    expected = hist.total / 256.0
    diff = hist.counts - expected
    return float((diff * diff / expected).sum())


def hamming_weight(data) -> float:
    arr = _as_array(data)
    if arr.size == 0:
        raise DumpError("empty view")
    counts = np.bincount(arr, minlength=256)
    return float(int(counts @ _POPCOUNT) / (8 * arr.size))


class Moments(NamedTuple):
    mean: float
    stddev: float
    kurtosis: float
    degenerate: bool


_POWERS = np.stack([_VALUES**k for k in range(1, 5)], axis=1)


def _moments_from_counts(counts: np.ndarray, n: int) -> tuple:
    """Population moments from integer histograms (rows of ``counts``).

    Central moments are formed from exact integer power sums (Python ints for
    the fourth moment, which overflows int64), so each value carries a single
    rounding step.
    """
    counts = np.atleast_2d(counts)
    sums = (counts @ _POWERS).astype(object)
    s1, s2, s3, s4 = sums[:, 0], sums[:, 1], sums[:, 2], sums[:, 3]
    num2 = n * s2 - s1 * s1
    num4 = n**3 * s4 - 4 * n**2 * s1 * s3 + 6 * n * s1 * s1 * s2 - 3 * s1**4
    m2 = num2.astype(np.float64) / float(n) ** 2
    m4 = num4.astype(np.float64) / float(n) ** 4
    mean = s1.astype(np.float64) / n
    degenerate = m2 == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        kurt = np.where(degenerate, 0.0, m4 / (m2 * m2) - 3.0)
    return mean, np.sqrt(m2), kurt, degenerate


def moments(data) -> Moments:
    """Mean, standard deviation and excess kurtosis of byte values.

    Zero-variance input reports kurtosis 0 with ``degenerate=True``.
    """
    arr = _as_array(data)
    if arr.size == 0:
        raise DumpError("empty view")
    counts = np.bincount(arr, minlength=256).astype(np.int64)
    mean, sd, kurt, deg = _moments_from_counts(counts, arr.size)
    return Moments(float(mean[0]), float(sd[0]), float(kurt[0]), bool(deg[0]))


def _ngram_codes(mat: np.ndarray, n: int) -> np.ndarray:
    """Integer code of every overlapping n-gram along axis 1 of ``mat``."""
    width = mat.shape[1] - n + 1
    dtype = np.uint16 if n <= 2 else np.uint32
    codes = mat[:, :width].astype(dtype)
    for k in range(1, n):
        codes = (codes << 8) | mat[:, k : k + width].astype(dtype)
    return codes


def _row_entropy_sorted(codes: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row of a row-sorted integer matrix.

    Uses H = log2(m) - (1/m) * sum(L*log2(L)) over runs of equal codes; runs of
    length one contribute nothing, so only repeated positions are visited.
    """
    rows, m = codes.shape
    cont = np.zeros((rows, m), dtype=bool)
    cont[:, :-1] = codes[:, 1:] == codes[:, :-1]
    idx = np.flatnonzero(cont)
    out = np.full(rows, np.log2(m)) if m > 1 else np.zeros(rows)
    if idx.size == 0:
        return out
    first = np.concatenate(([0], np.flatnonzero(np.diff(idx) != 1) + 1))
    run = np.diff(np.append(first, idx.size)) + 1
    owner = idx[first] // m
    weighted = np.bincount(owner, weights=run * np.log2(run), minlength=rows)
    out -= weighted / m
    # a single run spanning the row is exactly zero
    full = np.zeros(rows, dtype=bool)
    full[owner[run == m]] = True
    out[full] = 0.0
    return out


def ngram_entropy(data, n: int = 2) -> float:
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    arr = _as_array(data)
    if arr.size < n or arr.size == 0:
        raise DumpError(f"view shorter than n={n}")
    codes = np.sort(_ngram_codes(arr[None, :], n), axis=1)
    return float(_row_entropy_sorted(codes)[0])


@dataclass(frozen=True)
class WindowStats:
    offset: int
    shannon_bits: float
    fast_entropy: float
    chi_square: float
    hamming_fraction: float
    mean: float
    stddev: float
    kurtosis: float
    bigram_bits: float
    degenerate: bool = False


def window_stats(data, offset: int = 0) -> WindowStats:
    """Scalar reference for one window."""
    hist = byte_histogram(_as_array(data))
    m = moments(data)
    return WindowStats(
        offset=offset,
        shannon_bits=shannon_entropy(hist),
        fast_entropy=fast_entropy(hist),
        chi_square=chi_square(hist),
        hamming_fraction=hamming_weight(data),
        mean=m.mean,
        stddev=m.stddev,
        kurtosis=m.kurtosis,
        bigram_bits=ngram_entropy(data, 2) if hist.total >= 2 else 0.0,
        degenerate=m.degenerate,
    )


@dataclass
class WindowTable:
    """Columnar window statistics; one entry per window, offset ascending."""

    offset: np.ndarray
    shannon: np.ndarray
    fast_entropy: np.ndarray
    chi2: np.ndarray
    hamming: np.ndarray
    mean: np.ndarray
    stddev: np.ndarray
    kurtosis: np.ndarray
    bigram: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.offset)

    def column(self, name: str) -> np.ndarray:
        if name == "fast_entropy_norm":
            return (self.fast_entropy - 1.0) / FAST_ENTROPY_SPAN
        return getattr(self, name)

    def row(self, i: int) -> WindowStats:
        return WindowStats(
            offset=int(self.offset[i]),
            shannon_bits=float(self.shannon[i]),
            fast_entropy=float(self.fast_entropy[i]),
            chi_square=float(self.chi2[i]),
            hamming_fraction=float(self.hamming[i]),
            mean=float(self.mean[i]),
            stddev=float(self.stddev[i]),
            kurtosis=float(self.kurtosis[i]),
            bigram_bits=float(self.bigram[i]),
            degenerate=bool(self.degenerate[i]),
        )

    @classmethod
    def concat(cls, parts: list["WindowTable"]) -> "WindowTable":
        names = [f.name for f in fields(cls)]
        if not parts:
            return cls(*[np.empty(0) for _ in names])
        return cls(*[np.concatenate([getattr(p, k) for p in parts]) for k in names])


def _matrix_stats(mat: np.ndarray, with_bigram: bool = True) -> dict[str, np.ndarray]:
    rows, n = mat.shape
    idx = (np.arange(rows, dtype=np.int64)[:, None] << 8) + mat
    counts = np.bincount(idx.ravel(), minlength=rows * 256).reshape(rows, 256)
    expected = n / 256.0
    mean, sd, kurt, deg = _moments_from_counts(counts, n)
    out = {
        "shannon": _plogp_table(n)[counts].sum(axis=1),
        "fast_entropy": 2.0 - _cube_table(n)[counts].sum(axis=1),
        "chi2": np.einsum("ij,ij->i", counts, counts) / expected - n,
        "hamming": (counts @ _POPCOUNT) / (8.0 * n),
        "mean": mean,
        "stddev": sd,
        "kurtosis": kurt,
        "degenerate": deg,
    }
    if with_bigram and n >= 2:
        out["bigram"] = _row_entropy_sorted(np.sort(_ngram_codes(mat, 2), axis=1))
    else:
        out["bigram"] = np.zeros(rows)
    return out


def matrix_table(mat: np.ndarray, offsets: np.ndarray, with_bigram: bool = True) -> WindowTable:
    """Statistics for each row of a window matrix, computed in bounded chunks."""
    parts = []
    for s in range(0, mat.shape[0], _CHUNK):
        part = _matrix_stats(mat[s : s + _CHUNK], with_bigram)
        parts.append(WindowTable(offset=offsets[s : s + _CHUNK], **part))
    return WindowTable.concat(parts)


def window_table(
    arr: np.ndarray,
    cfg: WindowConfig,
    first: int = 0,
    count: int | None = None,
    with_bigram: bool = True,
) -> WindowTable:
    """Statistics for windows ``first .. first+count`` of ``arr``."""
    mat = window_matrix(arr, cfg)
    if count is None:
        count = mat.shape[0] - first
    mat = mat[first : first + count]
    offsets = (np.arange(count, dtype=np.int64) + first) * cfg.stride
    return matrix_table(mat, offsets, with_bigram)


def ngram_series(arr: np.ndarray, cfg: WindowConfig, n: int) -> np.ndarray:
    mat = window_matrix(arr, cfg)
    if cfg.window_len < n:
        raise DumpError(f"window shorter than n={n}")
    out = [
        _row_entropy_sorted(np.sort(_ngram_codes(mat[s : s + _CHUNK], n), axis=1))
        for s in range(0, mat.shape[0], _CHUNK)
    ]
    return np.concatenate(out)


@dataclass(frozen=True)
class EntropySeries:
    values: np.ndarray
    stride: int
    window_len: int
    metric: str

    def __len__(self) -> int:
        return len(self.values)


SERIES_METRICS = frozenset(STAT_COLUMNS) | {"fast_entropy_norm", "trigram"}


def entropy_series(dump: MemoryDump, cfg: WindowConfig, metric: str = "shannon") -> EntropySeries:
    if metric not in SERIES_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    cfg.window_count(len(dump))
    if metric == "trigram":
        values = ngram_series(dump.array, cfg, 3)
    else:
        table = window_table(dump.array, cfg, with_bigram=(metric == "bigram"))
        values = table.column(metric)
    return EntropySeries(np.asarray(values, dtype=np.float64), cfg.stride, cfg.window_len, metric)


def multiscale_series(
    dump: MemoryDump, window_lens: list[int], metric: str = "shannon", overlap: int = 4
) -> dict[int, EntropySeries]:
    """Entropy series for several window lengths, each advancing by len - overlap."""
    out = {}
    for wl in window_lens:
        cfg = WindowConfig(wl, max(1, wl - overlap))
        out[wl] = entropy_series(dump, cfg, metric)
    return out
