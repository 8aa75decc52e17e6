"""Windowless byte-level detection: pool tags, byte and bit signatures, PE headers."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dump import MemoryDump

KINDS = ("exact", "masked", "tag", "bitmask")
DOS_STUB = b"This program cannot be run in DOS mode"
PE_MAGIC = b"PE\x00\x00"
MAX_SECTIONS = 96


class SignatureError(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    id: str
    kind: str
    pattern: bytes
    mask: bytes | None = None
    alignment: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SignatureError(f"{self.id}: unknown kind {self.kind!r}")
        if not self.pattern:
            raise SignatureError(f"{self.id}: empty pattern")
        if self.kind in ("masked", "bitmask"):
            if self.mask is None or len(self.mask) != len(self.pattern):
                raise SignatureError(f"{self.id}: mask length must equal pattern length")
            if self.kind == "masked" and any(m not in (0x00, 0xFF) for m in self.mask):
                raise SignatureError(f"{self.id}: masked kind takes whole-byte masks (00/FF)")
        elif self.mask is not None:
            raise SignatureError(f"{self.id}: {self.kind} signatures take no mask")
        if self.kind == "tag" and len(self.pattern) != 4:
            raise SignatureError(f"{self.id}: pool tags are 4 bytes")
        if self.alignment is None:
            object.__setattr__(self, "alignment", 4 if self.kind == "tag" else 1)
        a = self.alignment
        if a < 1 or a & (a - 1):
            raise SignatureError(f"{self.id}: alignment must be a power of two")

    @property
    def care(self) -> bytes:
        return self.mask if self.mask is not None else b"\xff" * len(self.pattern)

    def matches_at(self, data, pos: int) -> bool:
        end = pos + len(self.pattern)
        if pos < 0 or end > len(data):
            return False
        if self.mask is None:
            return data[pos:end] == self.pattern
        window = data[pos:end]
        return all((b ^ p) & m == 0 for b, p, m in zip(window, self.pattern, self.mask))


@dataclass(frozen=True)
class Match:
    signature_id: str
    offset: int
    matched_len: int


def _byte_regex(value: int, care: int) -> bytes:
    if care == 0xFF:
        return re.escape(bytes([value]))
    if care == 0x00:
        return b"."
    allowed = [v for v in range(256) if (v ^ value) & care == 0]
    return b"[" + b"".join(re.escape(bytes([v])) for v in allowed) + b"]"


class SignatureSet:
    """Compiled, immutable signature collection.

    Byte-granular signatures share one regex alternation that locates every
    position where at least one of them can start; each such position is then
    checked against every signature so overlapping hits are all reported.
    Bit-granular signatures are checked with vectorized masks.
    """

    def __init__(self, signatures: Sequence[Signature]) -> None:
        seen = set()
        for s in signatures:
            if s.id in seen:
                raise SignatureError(f"duplicate signature id {s.id!r}")
            seen.add(s.id)
        self.signatures = tuple(signatures)
        self._bytewise = tuple(s for s in self.signatures if s.kind != "bitmask")
        self._bitwise = tuple(s for s in self.signatures if s.kind == "bitmask")
        self.max_len = max((len(s.pattern) for s in self.signatures), default=0)
        self._rx = None
        if self._bytewise:
            alts = []
            for s in sorted(self._bytewise, key=lambda s: -len(s.pattern)):
                alt = b"".join(_byte_regex(p, m) for p, m in zip(s.pattern, s.care))
                if alt not in alts:
                    alts.append(alt)
            self._rx = re.compile(b"|".join(alts), re.DOTALL)
        self._by_first: dict[int | None, list[Signature]] = {}
        for s in self._bytewise:
            key = s.pattern[0] if s.care[0] == 0xFF else None
            self._by_first.setdefault(key, []).append(s)

    def __len__(self) -> int:
        return len(self.signatures)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.signatures]

    def scan_range(self, data, start: int = 0, end: int | None = None) -> list[Match]:
        """Matches whose offset lies in ``[start, end)``; may read past ``end``."""
        n = len(data)
        end = n if end is None else min(end, n)
        out: list[Match] = []
        if self._rx is not None and start < end:
            limit = min(n, end + self.max_len - 1)
            floating = self._by_first.get(None, [])
            search = self._rx.search
            pos = start
            while pos < end:
                m = search(data, pos, limit)
                if m is None:
                    break
                p = m.start()
                if p >= end:
                    break
                for s in self._by_first.get(data[p], []) + floating:
                    if p % s.alignment == 0 and s.matches_at(data, p):
                        out.append(Match(s.id, p, len(s.pattern)))
                pos = p + 1
        for s in self._bitwise:
            out.extend(
                Match(s.id, p, len(s.pattern))
                for p in _bitmask_positions(data, s, start, end)
            )
        out.sort(key=lambda m: (m.offset, m.signature_id))
        return out


def compile_signatures(signatures: Iterable[Signature]) -> SignatureSet:
    return SignatureSet(list(signatures))


def _bitmask_positions(data, sig: Signature, start: int, end: int) -> np.ndarray:
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    m = len(sig.pattern)
    last = min(end, len(arr) - m + 1)
    if last <= start:
        return np.empty(0, dtype=np.int64)
    first = start + (-start % sig.alignment)
    positions = np.arange(first, last, sig.alignment, dtype=np.int64)
    ok = np.ones(len(positions), dtype=bool)
    for i, (p, c) in enumerate(zip(sig.pattern, sig.care)):
        if c == 0:
            continue
        ok &= ((arr[positions + i] ^ p) & c) == 0
    return positions[ok]


def scan(dump: MemoryDump | bytes, sigset: SignatureSet) -> list[Match]:
    data = dump.data if isinstance(dump, MemoryDump) else bytes(dump)
    return sigset.scan_range(data)


def scan_bitmask(dump: MemoryDump | bytes, sig: Signature) -> list[Match]:
    if sig.mask is None:
        raise SignatureError(f"{sig.id}: bitmask scan needs a care mask")
    data = dump.data if isinstance(dump, MemoryDump) else bytes(dump)
    return [Match(sig.id, int(p), len(sig.pattern)) for p in _bitmask_positions(data, sig, 0, len(data))]


def kernel_pointer_density(data, width: int = 4) -> float:
    """Fraction of aligned little-endian dwords whose value is >= 0x80000000."""
    if width != 4:
        raise ValueError("only 4-byte pointers are supported")
    arr = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    count = len(arr) // width
    if count == 0:
        raise ValueError("view shorter than pointer width")
    high = arr[3 : count * width : width] >= 0x80
    return float(np.count_nonzero(high) / count)


@dataclass(frozen=True)
class PeCandidate:
    offset: int
    e_lfanew: int
    machine: int
    section_count: int


def pe_header_scan(dump: MemoryDump | bytes) -> list[PeCandidate]:
    """Offsets where MZ, e_lfanew and the PE signature line up."""
    data = dump.data if isinstance(dump, MemoryDump) else bytes(dump)
    n = len(data)
    out = []
    pos = data.find(b"MZ")
    while pos != -1:
        if pos + 0x40 <= n:
            (lfanew,) = struct.unpack_from("<I", data, pos + 0x3C)
            target = pos + lfanew
            if 0 < lfanew and target + 24 <= n and data[target : target + 4] == PE_MAGIC:
                machine, sections = struct.unpack_from("<HH", data, target + 4)
                if 1 <= sections <= MAX_SECTIONS:
                    out.append(PeCandidate(pos, lfanew, machine, sections))
        pos = data.find(b"MZ", pos + 1)
    return out


def dos_stub_scan(dump: MemoryDump | bytes) -> list[Match]:
    data = dump.data if isinstance(dump, MemoryDump) else bytes(dump)
    out = []
    pos = data.find(DOS_STUB)
    while pos != -1:
        out.append(Match("dos_stub", pos, len(DOS_STUB)))
        pos = data.find(DOS_STUB, pos + 1)
    return out


_TOKEN = re.compile(r'"[^"]*"|\S+')


def _parse_bytes(tok: str) -> bytes:
    if tok.startswith('"'):
        return tok[1:-1].encode("latin-1")
    return bytes.fromhex(tok)


def parse_signatures(text: str) -> list[Signature]:
    sigs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        toks = _TOKEN.findall(stripped)
        if len(toks) < 3:
            raise SignatureError(f"line {lineno}: expected 'id kind pattern [mask] [alignment]'")
        sid, kind, pat, rest = toks[0], toks[1], toks[2], toks[3:]
        try:
            pattern = _parse_bytes(pat)
            mask = None
            if kind in ("masked", "bitmask"):
                if not rest:
                    raise SignatureError(f"line {lineno}: {kind} signature needs a mask")
                mask, rest = bytes.fromhex(rest[0]), rest[1:]
            alignment = int(rest[0], 0) if rest else None
            if len(rest) > 1:
                raise SignatureError(f"line {lineno}: trailing fields")
        except ValueError as exc:
            raise SignatureError(f"line {lineno}: {exc}") from exc
        sigs.append(Signature(sid, kind, pattern, mask, alignment))
    return sigs


def load_signatures(path: str | Path) -> list[Signature]:
    return parse_signatures(Path(path).read_text(encoding="utf-8"))


def default_signatures() -> list[Signature]:
    text = resources.files("memsieve").joinpath("data/default_signatures.txt").read_text()
    return parse_signatures(text)
