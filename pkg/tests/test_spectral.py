from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from memsieve.disasm import linear_sweep, mnemonic_histogram
from memsieve.corpus import generate_payload
from memsieve.dump import MemoryDump, WindowConfig, byte_histogram
from memsieve.spectral import SeriesError, haar_inverse, haar_wavelet, stft, zipf_fit
from memsieve.stats import entropy_series


def test_stft_constant_series():
    spec = stft(np.full(64, 3.5), 16, 4)
    assert spec.shape == ((64 - 16) // 4 + 1, 9)
    assert np.allclose(spec[:, 0], 16 * 3.5)
    assert spec[:, 1:].max() <= 1e-9


def test_stft_alternating_series_hits_nyquist():
    x = [1.0 if i % 2 == 0 else -1.0 for i in range(32)]
    spec = stft(x, 8, 8)
    ref = oracles.dft_mag(x[:8])
    assert np.allclose(spec[0], ref, atol=1e-12)
    assert spec[0, -1] == pytest.approx(8.0)
    assert spec[0, :-1].max() <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=8, max_size=40), st.integers(2, 8), st.integers(1, 5))
def test_stft_against_direct_dft(x, frame, hop):
    spec = stft(x, frame, hop)
    assert spec.shape[0] == (len(x) - frame) // hop + 1
    for i, row in enumerate(spec):
        ref = oracles.dft_mag(x[i * hop : i * hop + frame])
        assert np.allclose(row, ref, atol=1e-9)


def test_stft_errors():
    with pytest.raises(SeriesError):
        stft([1.0, 2.0], 4, 1)
    with pytest.raises(SeriesError):
        stft([1.0] * 8, 4, 0)


def test_stft_accepts_entropy_series():
    s = entropy_series(MemoryDump(random.Random(0).randbytes(8192)), WindowConfig())
    assert stft(s, 8, 4).shape[1] == 5


def test_haar_round_trip_small():
    pyr = haar_wavelet([1.0, 1.0, 1.0, 1.0], 1)
    assert np.allclose(pyr.approx, [math.sqrt(2)] * 2)
    assert np.allclose(pyr.details[0], 0.0)
    assert np.allclose(haar_inverse(pyr), [1, 1, 1, 1], atol=1e-12)


def test_haar_constant_has_zero_details():
    pyr = haar_wavelet(np.full(64, 2.5), 4)
    assert pyr.levels == 4
    assert all(np.abs(d).max() == 0.0 for d in pyr.details)


def test_haar_first_level_against_oracle():
    x = [random.Random(1).random() for _ in range(32)]
    a, d = oracles.haar_step(x)
    pyr = haar_wavelet(x, 1)
    assert np.allclose(pyr.approx, a, atol=1e-15)
    assert np.allclose(pyr.details[0], d, atol=1e-15)


def test_haar_truncates_to_block_multiple():
    pyr = haar_wavelet(np.arange(37.0), 2)
    assert len(haar_inverse(pyr)) == 36


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=16, max_size=300), st.integers(1, 4))
def test_haar_parseval_and_inverse(x, levels):
    pyr = haar_wavelet(x, levels)
    kept = np.asarray(x[: len(x) - len(x) % (1 << levels)])
    energy = float(np.dot(kept, kept))
    assert pyr.energy() == pytest.approx(energy, rel=1e-9, abs=1e-9)
    assert np.allclose(haar_inverse(pyr), kept, rtol=0, atol=1e-12 * max(1.0, np.abs(kept).max()))


def test_haar_errors():
    with pytest.raises(SeriesError):
        haar_wavelet([1.0, 2.0, 3.0], 2)
    with pytest.raises(SeriesError):
        haar_wavelet([1.0, 2.0], 0)


def test_zipf_recovers_synthetic_law():
    freqs = [1e6 / (r + 2) ** 1.2 for r in range(1, 101)]
    fit = zipf_fit(freqs)
    assert fit.shift_q == 2.0
    assert fit.exponent_s == pytest.approx(1.2, rel=0.05)
    assert fit.ranks_used == 100


def test_zipf_uniform_is_flat():
    fit = zipf_fit([50] * 40)
    assert abs(fit.exponent_s) <= 0.05


def test_zipf_needs_three_ranks():
    with pytest.raises(SeriesError, match="insufficient ranks"):
        zipf_fit({"a": 5, "b": 3})
    with pytest.raises(SeriesError):
        zipf_fit(byte_histogram(b"abababab"))


def test_zipf_input_order_irrelevant():
    freqs = [1e5 / (r + 5) ** 0.8 for r in range(1, 101)]
    shuffled = freqs[:]
    random.Random(3).shuffle(shuffled)
    assert zipf_fit(shuffled) == zipf_fit(freqs)


def test_zipf_byte_permutation_invariant():
    data = generate_payload(4096, "text", 1)
    perm = list(range(256))
    random.Random(2).shuffle(perm)
    mapped = bytes(perm[b] for b in data)
    assert zipf_fit(byte_histogram(data)) == zipf_fit(byte_histogram(mapped))


def test_zipf_on_mnemonics():
    instrs, _ = linear_sweep(generate_payload(8192, "code", 4))
    hist = {k: v for k, v in mnemonic_histogram(instrs).items() if v}
    fit = zipf_fit(hist)
    assert fit.ranks_used == len(hist) and fit.exponent_s > 0
