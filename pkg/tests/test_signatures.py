from __future__ import annotations

import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from memsieve.corpus import make_pe_header
from memsieve.dump import MemoryDump
from memsieve.signatures import (
    DOS_STUB,
    Signature,
    SignatureError,
    compile_signatures,
    default_signatures,
    dos_stub_scan,
    kernel_pointer_density,
    parse_signatures,
    pe_header_scan,
    scan,
    scan_bitmask,
)


def pairs(matches):
    return [(m.offset, m.signature_id) for m in matches]


def test_compile_tags():
    s = compile_signatures([Signature("MmLd", "tag", b"MmLd"), Signature("sErv", "tag", b"sErv")])
    assert len(s) == 2


def test_duplicate_ids_rejected():
    with pytest.raises(SignatureError, match="duplicate"):
        compile_signatures([Signature("a", "exact", b"x"), Signature("a", "exact", b"y")])


def test_empty_set_finds_nothing():
    assert scan(b"anything at all", compile_signatures([])) == []


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(id="e", kind="exact", pattern=b""),
        dict(id="m", kind="masked", pattern=b"ab", mask=b"\xff"),
        dict(id="m", kind="masked", pattern=b"ab", mask=b"\xff\x0f"),
        dict(id="x", kind="exact", pattern=b"ab", mask=b"\xff\xff"),
        dict(id="t", kind="tag", pattern=b"abc"),
        dict(id="a", kind="exact", pattern=b"ab", alignment=3),
        dict(id="k", kind="weird", pattern=b"ab"),
    ],
)
def test_signature_invariants(kwargs):
    with pytest.raises(SignatureError):
        Signature(**kwargs)


def test_tag_alignment_default():
    assert Signature("t", "tag", b"Driv").alignment == 4
    assert Signature("e", "exact", b"Driv").alignment == 1


def test_service_tag_at_aligned_offset():
    data = bytearray(0x2000)
    struct.pack_into("<I", data, 0x1000, 0x76724573)
    assert data[0x1000:0x1004] == b"sErv"
    out = scan(MemoryDump(bytes(data)), compile_signatures(default_signatures()))
    assert pairs(out) == [(0x1000, "sErv")]


def test_misaligned_tag_ignored():
    data = bytearray(64)
    data[13:17] = b"MmLd"
    assert scan(bytes(data), compile_signatures(default_signatures())) == []


def test_overlapping_matches():
    out = scan(b"AAAA", compile_signatures([Signature("aa", "exact", b"AA")]))
    assert [m.offset for m in out] == [0, 1, 2]


def test_absent_random_pattern():
    rng = random.Random(7)
    data = rng.randbytes(1 << 20)
    pat = rng.randbytes(16)
    assert pat not in data
    assert scan(data, compile_signatures([Signature("p", "exact", pat)])) == []


def test_bitmask_zero_care_matches_everywhere():
    sig = Signature("z", "bitmask", b"\x12\x34\x56\x78", b"\x00" * 4, 4)
    out = scan_bitmask(bytes(64), sig)
    assert [m.offset for m in out] == list(range(0, 61, 4))


def test_bitmask_high_bit_of_byte_three():
    sig = Signature("hb", "bitmask", b"\x00\x00\x00\x80", b"\x00\x00\x00\x80", 4)
    for v in range(256):
        data = bytes([1, 2, 3, v])
        hit = bool(scan_bitmask(data, sig))
        assert hit == (v >= 0x80)


@settings(max_examples=60, deadline=None)
@given(st.binary(min_size=0, max_size=400), st.binary(min_size=1, max_size=3), st.sampled_from([1, 2, 4]))
def test_full_care_bitmask_equals_exact(data, pat, align):
    exact = Signature("e", "exact", pat, None, align)
    full = Signature("e", "bitmask", pat, b"\xff" * len(pat), align)
    assert pairs(scan_bitmask(data, full)) == pairs(scan(data, compile_signatures([exact])))


def test_kernel_pointer_density_examples():
    assert kernel_pointer_density(struct.pack("<I", 0x81234567) * 64) == 1.0
    assert kernel_pointer_density(bytes(256)) == 0.0
    half = struct.pack("<I", 0x80000000) * 8 + struct.pack("<I", 0x7FFFFFFF) * 8
    assert kernel_pointer_density(half) == 0.5
    with pytest.raises(ValueError):
        kernel_pointer_density(b"abc")


def _hand_pe() -> bytes:
    hdr = bytearray(0x200)
    hdr[0:2] = b"MZ"
    struct.pack_into("<I", hdr, 0x3C, 0xC0)
    hdr[0xC0:0xC4] = b"PE\x00\x00"
    struct.pack_into("<HH", hdr, 0xC4, 0x14C, 5)
    return bytes(hdr)


def test_pe_header_found():
    data = bytearray(0x4000)
    data[0x2000:0x2200] = _hand_pe()
    cands = pe_header_scan(bytes(data))
    assert [(c.offset, c.e_lfanew, c.machine, c.section_count) for c in cands] == [(0x2000, 0xC0, 0x14C, 5)]


def test_pe_header_wiped_is_missed():
    data = bytearray(0x4000)
    data[0x2000:0x2400] = make_pe_header(3)
    assert [c.offset for c in pe_header_scan(bytes(data))] == [0x2000]
    data[0x2000:0x2400] = bytes(0x400)
    assert pe_header_scan(bytes(data)) == []


def test_pe_lfanew_past_end_rejected():
    data = bytearray(0x100)
    data[0:2] = b"MZ"
    struct.pack_into("<I", data, 0x3C, 0x1000)
    assert pe_header_scan(bytes(data)) == []


def test_pe_section_count_sanity():
    hdr = bytearray(_hand_pe())
    struct.pack_into("<H", hdr, 0xC6, 0)
    assert pe_header_scan(bytes(hdr)) == []
    struct.pack_into("<H", hdr, 0xC6, 97)
    assert pe_header_scan(bytes(hdr)) == []


def test_dos_stub_scan():
    one = b"\x00" * 50 + DOS_STUB + b"\x00" * 10
    assert [m.offset for m in dos_stub_scan(one)] == [50]
    broken = one.replace(b"DOS", b"DoS")
    assert dos_stub_scan(broken) == []
    two = DOS_STUB + b"--" + DOS_STUB
    assert [m.offset for m in dos_stub_scan(two)] == [0, len(DOS_STUB) + 2]


def test_signature_file_parse():
    sigs = parse_signatures(
        '# comment\nMmLd tag "MmLd"\nm masked 41424344 ff00ffff\nb bitmask 80 80 4\nx exact 9090 2\n'
    )
    assert [(s.id, s.kind, s.alignment) for s in sigs] == [
        ("MmLd", "tag", 4), ("m", "masked", 1), ("b", "bitmask", 4), ("x", "exact", 2)
    ]
    assert sigs[1].mask == b"\xff\x00\xff\xff"
    with pytest.raises(SignatureError, match="line 1"):
        parse_signatures("m masked 4142\n")
    with pytest.raises(SignatureError):
        parse_signatures("x exact zz\n")


def test_default_set_contents():
    ids = {s.id for s in default_signatures()}
    assert ids == {"MmLd", "sErv", "serH", "Driv", "dos_stub"}
    serh = next(s for s in default_signatures() if s.id == "serH")
    assert serh.pattern == b"serH"


def _random_sig(rng: random.Random, i: int, alphabet: bytes) -> Signature:
    kind = rng.choice(["exact", "masked", "tag", "bitmask"])
    n = 4 if kind == "tag" else rng.randrange(1, 6)
    pat = bytes(rng.choice(alphabet) for _ in range(n))
    mask = None
    if kind == "masked":
        mask = bytes(rng.choice([0x00, 0xFF]) for _ in range(n))
    elif kind == "bitmask":
        mask = bytes(rng.randrange(256) for _ in range(n))
    align = None if kind == "tag" else rng.choice([1, 1, 2, 4, 8])
    return Signature(f"s{i}", kind, pat, mask, align)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scan_matches_naive_oracle(seed):
    rng = random.Random(seed)
    alphabet = bytes(rng.sample(range(256), rng.randrange(2, 6)))
    data = bytes(rng.choice(alphabet) for _ in range(rng.randrange(0, 700)))
    sigs = [_random_sig(rng, i, alphabet) for i in range(rng.randrange(1, 6))]
    got = pairs(scan(data, compile_signatures(sigs)))
    assert sorted(got) == oracles.naive_scan(data, sigs)
    assert got == sorted(got)
    align = {s.id: s.alignment for s in sigs}
    assert all(off % align[sid] == 0 for off, sid in got)


@settings(max_examples=80, deadline=None)
@given(st.binary(min_size=0, max_size=300), st.binary(min_size=0, max_size=300))
def test_concatenation_completeness(a, b):
    sigs = [Signature("t", "exact", b"\x00\x01"), Signature("m", "masked", b"\x00\x00\x00", b"\xff\x00\xff")]
    s = compile_signatures(sigs)
    cut = len(a) - s.max_len
    left = [p for p in pairs(scan(a, s)) if p[0] < cut]
    joined = [p for p in pairs(scan(a + b, s)) if p[0] < cut]
    assert left == joined


def test_scan_range_respects_bounds():
    s = compile_signatures([Signature("a", "exact", b"AB")])
    data = b"ABABABAB"
    assert [m.offset for m in s.scan_range(data, 2, 5)] == [2, 4]
