from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from memsieve.dump import DumpError, MemoryDump, WindowConfig, byte_histogram
from memsieve.stats import (
    METRIC_RANGES,
    UNIFORM_FAST_ENTROPY,
    chi_square,
    entropy_series,
    fast_entropy,
    fast_entropy_normalized,
    hamming_weight,
    moments,
    multiscale_series,
    ngram_entropy,
    shannon_entropy,
    window_stats,
    window_table,
)


def H(data):
    return byte_histogram(data)


def test_shannon_examples():
    assert shannon_entropy(H(b"\x07" * 256)) == 0.0
    assert shannon_entropy(H(bytes(range(256)))) == 8.0
    assert shannon_entropy(H(b"ab" * 50)) == 1.0


def test_fast_entropy_examples():
    assert fast_entropy(H(b"x" * 10)) == 1.0
    assert fast_entropy(H(b"xy")) == 1.75
    expected = 2.0 - sum((1 / 256) ** 3 for _ in range(256))
    assert fast_entropy(H(bytes(range(256)))) == pytest.approx(expected, abs=1e-15)
    assert UNIFORM_FAST_ENTROPY == 2.0 - 2.0**-16


def test_fast_entropy_normalized_examples():
    assert fast_entropy_normalized(H(b"x" * 10)) == 0.0
    assert fast_entropy_normalized(H(bytes(range(256)))) == pytest.approx(1.0, abs=1e-15)
    assert fast_entropy_normalized(H(b"xy")) == pytest.approx(0.75 / (1 - 2.0**-16), rel=1e-15)


def test_chi_square_examples():
    assert chi_square(H(bytes(range(256)))) == 0.0
    assert chi_square(H(bytes(256))) == 255**2 + 255
    assert chi_square(H(bytes(range(256)) * 2)) == 0.0


def test_hamming_examples():
    assert hamming_weight(bytes(64)) == 0.0
    assert hamming_weight(b"\xff" * 64) == 1.0
    assert hamming_weight(b"\xf0" * 64) == 0.5


def test_moment_examples():
    m = moments(b"A" * 64)
    assert (m.mean, m.stddev, m.kurtosis, m.degenerate) == (65.0, 0.0, 0.0, True)
    m = moments(b"\x00\xff" * 32)
    assert (m.mean, m.stddev) == (127.5, 127.5)
    m = moments(bytes(range(256)))
    ref = math.sqrt(sum((v - 127.5) ** 2 for v in range(256)) / 256)
    assert m.mean == 127.5
    assert m.stddev == pytest.approx(ref, rel=1e-15)
    assert m.stddev == pytest.approx(73.9003, abs=1e-4)


def test_ngram_examples():
    assert ngram_entropy(b"AAAA", 2) == 0.0
    # AB, BA, AB -> {AB: 2, BA: 1}
    expected = -(2 / 3) * math.log2(2 / 3) - (1 / 3) * math.log2(1 / 3)
    assert ngram_entropy(b"ABAB", 2) == pytest.approx(expected, rel=1e-15)
    data = random.Random(3).randbytes(300)
    assert ngram_entropy(data, 1) == pytest.approx(shannon_entropy(H(data)), rel=1e-13)


def test_ngram_errors():
    with pytest.raises(ValueError):
        ngram_entropy(b"abc", 4)
    with pytest.raises(DumpError):
        ngram_entropy(b"a", 2)


def test_empty_views_rejected():
    for fn in (hamming_weight, moments):
        with pytest.raises(DumpError):
            fn(b"")


@pytest.mark.parametrize("seed", range(20))
def test_window_stats_against_oracles(seed):
    rng = random.Random(seed)
    alphabet = rng.randrange(1, 257)
    data = bytes(rng.randrange(alphabet) for _ in range(256))
    ws = window_stats(data)
    mean, sd, kurt = oracles.moments(data)
    assert ws.shannon_bits == pytest.approx(oracles.shannon(data), rel=1e-12, abs=1e-15)
    assert ws.fast_entropy == pytest.approx(oracles.fast_entropy(data), rel=1e-12)
    assert ws.chi_square == pytest.approx(oracles.chi_square(data), rel=1e-12, abs=1e-12)
    assert ws.hamming_fraction == pytest.approx(oracles.hamming(data), rel=1e-12)
    assert ws.mean == pytest.approx(mean, rel=1e-12)
    assert ws.stddev == pytest.approx(sd, rel=1e-12, abs=1e-15)
    assert ws.kurtosis == pytest.approx(kurt, rel=1e-12, abs=1e-12)
    assert ws.bigram_bits == pytest.approx(oracles.ngram(data, 2), rel=1e-12, abs=1e-15)


def test_table_rows_equal_scalar_reference():
    rng = np.random.default_rng(5)
    arr = np.concatenate([rng.integers(0, 256, 3000), np.zeros(600), rng.integers(60, 64, 900)]).astype(np.uint8)
    cfg = WindowConfig(256, 252)
    table = window_table(arr, cfg)
    for i in range(len(table)):
        off = int(table.offset[i])
        ref = window_stats(arr[off : off + 256], off)
        row = table.row(i)
        for name in ("shannon_bits", "fast_entropy", "chi_square", "hamming_fraction", "mean", "stddev",
                     "kurtosis", "bigram_bits"):
            assert getattr(row, name) == pytest.approx(getattr(ref, name), rel=1e-12, abs=1e-12), name
        assert row.degenerate == ref.degenerate


@settings(max_examples=150, deadline=None)
@given(st.binary(min_size=2, max_size=600))
def test_bounds_hold_on_arbitrary_input(data):
    ws = window_stats(data)
    n = len(data)
    assert 0.0 <= ws.shannon_bits <= 8.0 + 1e-12
    assert 1.0 <= ws.fast_entropy <= UNIFORM_FAST_ENTROPY + 1e-15
    assert 0.0 <= ws.chi_square <= 255.0 * n + 1e-9
    assert 0.0 <= ws.hamming_fraction <= 1.0
    assert 0.0 <= ws.mean <= 255.0
    assert 0.0 <= ws.stddev <= 127.5
    assert ws.kurtosis >= -2.0 - 1e-12
    lo, hi = METRIC_RANGES["bigram"]
    assert lo <= ws.bigram_bits <= hi
    one_symbol = len(set(data)) == 1
    assert (ws.shannon_bits == 0.0) == one_symbol == (ws.fast_entropy == 1.0)


@settings(max_examples=150, deadline=None)
@given(st.binary(min_size=1, max_size=512), st.randoms(use_true_random=False))
def test_histogram_stats_permutation_invariant(data, rnd):
    perm = list(range(256))
    rnd.shuffle(perm)
    mapped = bytes(perm[b] for b in data)
    a, b = H(data), H(mapped)
    assert shannon_entropy(b) == pytest.approx(shannon_entropy(a), rel=1e-12, abs=1e-15)
    assert fast_entropy(b) == pytest.approx(fast_entropy(a), rel=1e-12)
    assert chi_square(b) == pytest.approx(chi_square(a), rel=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.binary(min_size=1, max_size=512))
def test_doubling_keeps_entropy(data):
    assert shannon_entropy(H(data + data)) == pytest.approx(shannon_entropy(H(data)), rel=1e-12, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=256, max_size=256), st.data())
def test_mass_transfer_never_raises_entropy(counts, data):
    nz = [i for i, c in enumerate(counts) if c]
    if len(nz) < 2:
        counts[0] += 1
        counts[1] += 1
        nz = [0, 1]
    i, j = data.draw(st.sampled_from(nz)), data.draw(st.sampled_from(nz))
    if counts[i] > counts[j]:
        i, j = j, i
    t = data.draw(st.integers(0, counts[i]))
    before = byte_histogram_from(counts)
    counts[i] -= t
    counts[j] += t
    after = byte_histogram_from(counts)
    assert shannon_entropy(after) <= shannon_entropy(before) + 1e-12
    assert fast_entropy(after) <= fast_entropy(before) + 1e-12


def byte_histogram_from(counts):
    from memsieve.dump import ByteHistogram

    return ByteHistogram.from_counts(counts)


def test_series_on_zero_dump():
    s = entropy_series(MemoryDump(bytes(8192)), WindowConfig())
    assert (s.values == 0.0).all()
    assert s.metric == "shannon" and s.stride == 252


def test_series_random_then_zero_plateaus():
    rnd = random.Random(1).randbytes(4096)
    dump = MemoryDump(rnd + bytes(4096))
    cfg = WindowConfig()
    s = entropy_series(dump, cfg)
    for i, off in enumerate(range(0, len(dump) - 255, 252)):
        assert s.values[i] == pytest.approx(oracles.shannon(dump.data[off : off + 256]), abs=1e-12)
    first_zero = -(-4096 // 252)
    assert s.values[: 4096 // 252 - 1].min() > 7.0
    assert (s.values[first_zero:] == 0.0).all()


def test_series_errors():
    with pytest.raises(DumpError):
        entropy_series(MemoryDump(bytes(100)), WindowConfig())
    with pytest.raises(ValueError):
        entropy_series(MemoryDump(bytes(1000)), WindowConfig(), "nope")


def test_trigram_and_normalized_series():
    data = random.Random(2).randbytes(2048)
    cfg = WindowConfig(128, 128)
    s = entropy_series(MemoryDump(data), cfg, "trigram")
    for i in range(len(s)):
        assert s.values[i] == pytest.approx(oracles.ngram(data[128 * i : 128 * i + 128], 3), abs=1e-12)
    norm = entropy_series(MemoryDump(data), cfg, "fast_entropy_norm").values
    assert ((0 <= norm) & (norm <= 1)).all()


def test_multiscale_series_lengths():
    dump = MemoryDump(bytes(range(256)) * 64)
    out = multiscale_series(dump, [256, 1024, 4096])
    assert sorted(out) == [256, 1024, 4096]
    for wl, s in out.items():
        assert s.window_len == wl and s.stride == wl - 4
        assert np.allclose(s.values, 8.0)
