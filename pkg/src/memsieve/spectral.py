"""Series analysis of entropy streams and rank-frequency fits."""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .dump import ByteHistogram
from .stats import EntropySeries

Q_GRID = tuple(i * 0.5 for i in range(21))


class SeriesError(ValueError):
    pass


def _values(series) -> np.ndarray:
    vals = series.values if isinstance(series, EntropySeries) else series
    return np.asarray(vals, dtype=np.float64)


def stft(series, frame: int, hop: int) -> np.ndarray:
    """Magnitude spectrogram with a rectangular window.

    Returns an array of shape ``(frames, frame // 2 + 1)``.
    """
    x = _values(series)
    if frame < 1 or hop < 1:
        raise SeriesError("frame and hop must be positive")
    if frame > len(x):
        raise SeriesError(f"series of length {len(x)} is shorter than frame {frame}")
    count = (len(x) - frame) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop][:count]
    return np.abs(np.fft.rfft(frames, axis=1))


@dataclass
class HaarPyramid:
    approx: np.ndarray
    details: list[np.ndarray]  # finest level first

    @property
    def levels(self) -> int:
        return len(self.details)

    def energy(self) -> float:
        return float(np.dot(self.approx, self.approx) + sum(np.dot(d, d) for d in self.details))


_SQRT2 = math.sqrt(2.0)


def haar_wavelet(series, levels: int) -> HaarPyramid:
    """Orthonormal Haar decomposition over the largest 2**levels-aligned prefix."""
    x = _values(series)
    if levels < 1:
        raise SeriesError("levels must be at least 1")
    block = 1 << levels
    if len(x) < block:
        raise SeriesError(f"series of length {len(x)} too short for {levels} levels")
    approx = x[: len(x) - len(x) % block]
    details = []
    for _ in range(levels):
        even, odd = approx[0::2], approx[1::2]
        details.append((even - odd) / _SQRT2)
        approx = (even + odd) / _SQRT2
    return HaarPyramid(approx, details)


def haar_inverse(pyr: HaarPyramid) -> np.ndarray:
    approx = pyr.approx
    for d in reversed(pyr.details):
        out = np.empty(2 * len(approx))
        out[0::2] = (approx + d) / _SQRT2
        out[1::2] = (approx - d) / _SQRT2
        approx = out
    return approx


@dataclass(frozen=True)
class ZipfFit:
    exponent_s: float
    shift_q: float
    log_intercept: float
    r_squared: float
    ranks_used: int


def _frequencies(source) -> np.ndarray:
    if isinstance(source, ByteHistogram):
        freqs = source.counts
    elif isinstance(source, Mapping):
        freqs = list(source.values())
    else:
        freqs = source
    f = np.asarray(freqs, dtype=np.float64).ravel()
    if (f < 0).any():
        raise SeriesError("frequencies must be non-negative")
    return np.sort(f[f > 0])[::-1]


def _linfit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(np.dot(dx, dx))
    slope = float(np.dot(dx, dy)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(dy, dy))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return slope, float(intercept), r2


def zipf_fit(source, q_grid=Q_GRID) -> ZipfFit:
    """Fit f(r) = C / (r + q)**s to rank-ordered frequencies.

    ``source`` may be a ByteHistogram, a token->count mapping (for example a
    mnemonic histogram) or a plain sequence of counts. For each q on the grid
    s and log C come from least squares on log f against log(r + q); the q
    with the highest r² wins, ties going to the smaller q.
    """
    f = _frequencies(source)
    if len(f) < 3:
        raise SeriesError("insufficient ranks: need at least 3 non-zero frequencies")
    ranks = np.arange(1, len(f) + 1, dtype=np.float64)
    logf = np.log(f)
    best = None
    for q in q_grid:
        slope, intercept, r2 = _linfit(np.log(ranks + q), logf)
        if best is None or r2 > best[3]:
            best = (-slope, float(q), intercept, r2)
    s, q, c, r2 = best
    return ZipfFit(s, q, c, r2, len(f))
