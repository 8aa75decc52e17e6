from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memsieve.dump import (
    ByteHistogram,
    DumpError,
    MemoryDump,
    RegionManifest,
    WindowConfig,
    byte_histogram,
    iter_windows,
    load_dump,
    load_manifest,
    parse_manifest,
    window_matrix,
    window_offsets,
)


def test_load_zero_file(tmp_path):
    p = tmp_path / "z.bin"
    p.write_bytes(bytes(4096))
    dump = load_dump(p, base_address=0x80000000)
    assert len(dump) == 4096
    assert dump.base_address == 0x80000000
    assert dump.source_id == "z.bin"


def test_load_empty_file(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    with pytest.raises(DumpError, match="empty dump"):
        load_dump(p)


def test_repeated_ramp_has_uniform_histogram():
    dump = MemoryDump(bytes(range(256)) * 16)
    counts = [0] * 256
    for b in dump.data:
        counts[b] += 1
    assert set(counts) == {16}
    assert (byte_histogram(dump.data).counts == 16).all()


def test_dump_rejects_bad_page_size():
    with pytest.raises(DumpError):
        MemoryDump(b"abc", page_size=3000)


def test_dump_content_is_read_only():
    dump = MemoryDump(bytearray(b"abcd"))
    with pytest.raises(ValueError):
        dump.array[0] = 1
    assert dump.data == b"abcd"


def test_window_offsets_example():
    cfg = WindowConfig(256, 252)
    assert cfg.window_count(1024) == 4
    assert window_offsets(1024, cfg).tolist() == [0, 252, 504, 756]


def test_exact_fit_single_window():
    cfg = WindowConfig(256, 1)
    assert window_offsets(256, cfg).tolist() == [0]


def test_window_longer_than_dump():
    with pytest.raises(DumpError):
        WindowConfig().window_count(255)


@pytest.mark.parametrize("window,stride", [(0, 1), (16, 0), (16, 17)])
def test_window_config_invariants(window, stride):
    with pytest.raises(DumpError):
        WindowConfig(window, stride)


def test_defaults_overlap_by_four_bytes():
    cfg = WindowConfig()
    assert (cfg.window_len, cfg.stride) == (256, 252)
    assert WindowConfig.tiled(512).stride == 512


def test_histogram_examples():
    assert (byte_histogram(bytes(range(256))).counts == 1).all()
    h = byte_histogram(b"A" * 100)
    assert h.counts[0x41] == 100 and h.counts.sum() == 100
    h = byte_histogram(b"AABB")
    assert h.counts[0x41] == 2 and h.counts[0x42] == 2 and h.total == 4


def test_histogram_rejects_empty():
    with pytest.raises(DumpError):
        byte_histogram(b"")
    with pytest.raises(DumpError):
        ByteHistogram.from_counts([0] * 256)


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=1, max_size=4096))
def test_histogram_conservation(data):
    h = byte_histogram(data)
    assert int(h.counts.sum()) == h.total == len(data)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 300), st.data())
def test_window_coverage(length, window, data):
    if window > length:
        with pytest.raises(DumpError):
            WindowConfig(window, 1).window_count(length)
        return
    stride = data.draw(st.integers(1, window))
    cfg = WindowConfig(window, stride)
    offs = window_offsets(length, cfg)
    assert offs[-1] <= length - window
    covered = np.zeros(length, dtype=bool)
    for o in offs:
        covered[o : o + window] = True
    span = cfg.windowed_span(length)
    assert covered[:span].all() and not covered[span:].any()
    assert length - span < stride  # only a sub-stride tail is left out


def test_window_matrix_matches_iteration():
    dump = MemoryDump(np.random.default_rng(0).integers(0, 256, 5000, dtype=np.uint8))
    cfg = WindowConfig(100, 37)
    mat = window_matrix(dump.array, cfg)
    views = list(iter_windows(dump, cfg))
    assert mat.shape[0] == len(views)
    for row, (off, view) in zip(mat, views):
        assert row.tobytes() == bytes(view) == dump.data[off : off + 100]


def test_dump_immutability_across_scans():
    dump = MemoryDump(bytes(range(256)) * 4)
    first = [bytes(v) for _, v in iter_windows(dump, WindowConfig())]
    second = [bytes(v) for _, v in iter_windows(dump, WindowConfig())]
    assert first == second


def test_manifest_parse(tmp_path):
    m = parse_manifest("ntoskrnl 0x0 0x1000 driver\n")
    assert len(m) == 1
    e = m.entries[0]
    assert (e.name, e.start, e.length, e.kind) == ("ntoskrnl", 0, 0x1000, "driver")
    p = tmp_path / "m.txt"
    p.write_text(m.to_text())
    assert load_manifest(p) == m


def test_manifest_overlap_rejected():
    with pytest.raises(DumpError, match="overlap"):
        parse_manifest("a 0x0 0x2000 driver\nb 0x1000 0x1000 driver\n")


def test_empty_manifest_is_valid():
    assert len(parse_manifest("")) == 0
    assert len(RegionManifest()) == 0


def test_manifest_bounds():
    m = parse_manifest("a 0x0 0x2000 driver")
    m.check_bounds(0x2000)
    with pytest.raises(DumpError):
        m.check_bounds(0x1fff)
