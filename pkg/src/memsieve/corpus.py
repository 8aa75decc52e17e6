"""Deterministic synthetic content: subset x86 code, text, random bytes and PE headers."""
from __future__ import annotations

import random
import struct

from .disasm import EAX, EBP, EBX, ECX, EDI, EDX, ESI
from .signatures import DOS_STUB, PE_MAGIC

PAYLOAD_KINDS = ("code", "text", "random")
MIN_PAYLOAD = 64
HEADER_LEN = 0x400

_GP = (EAX, ECX, EDX, EBX, ESI, EDI)
_ALU = (0x03, 0x2B, 0x23, 0x0B, 0x33, 0x13)  # add sub and or xor adc, reg <- r/m
_SAVED = (0x53, 0x56, 0x57)  # push ebx/esi/edi


def _modrm(mod: int, reg: int, rm: int) -> int:
    return (mod << 6) | (reg << 3) | rm


def _kernel_addr(rng: random.Random) -> int:
    return rng.randrange(0x80400000, 0x81000000) & ~3


def _imm32(rng: random.Random) -> bytes:
    if rng.random() < 0.35:
        return struct.pack("<I", _kernel_addr(rng))
    return struct.pack("<I", rng.choice((0, 1, 2, 4, 8, 0x10, 0x20, 0xFF, 0x100, 0x1000)) + rng.randrange(4))


def _local(rng: random.Random) -> int:
    # [ebp-4*k] locals or [ebp+8+4*k] arguments
    return (256 - 4 * rng.randrange(1, 16)) if rng.random() < 0.6 else 8 + 4 * rng.randrange(0, 6)


class _Insn:
    __slots__ = ("code", "fix", "arg")

    def __init__(self, code: bytes, fix: str | None = None, arg: int = 0) -> None:
        self.code = code
        self.fix = fix
        self.arg = arg


def _body_insn(rng: random.Random, live: list[int]) -> list[_Insn]:
    r = rng.choice(_GP)
    src = rng.choice(live) if live and rng.random() < 0.7 else rng.choice(_GP)
    roll = rng.random()
    if roll < 0.16:
        out = [_Insn(bytes((0x8B, _modrm(1, r, 5), _local(rng))))]
    elif roll < 0.24:
        out = [_Insn(bytes((0x89, _modrm(1, src, 5), _local(rng))))]
    elif roll < 0.32:
        out = [_Insn(bytes((0x8B, _modrm(3, r, src))))]
    elif roll < 0.40:
        out = [_Insn(bytes((0xB8 + r,)) + _imm32(rng))]
    elif roll < 0.46:
        base = rng.choice((EAX, ECX, EDX, EBX, ESI, EDI))
        out = [_Insn(bytes((0x8B, _modrm(1, r, base), rng.randrange(0, 64, 4))))]
    elif roll < 0.49:
        out = [_Insn(bytes((0x8B, _modrm(1, r, 4), 0x24, rng.randrange(4, 40, 4))))]
    elif roll < 0.58:
        out = [_Insn(bytes((rng.choice(_ALU), _modrm(3, r, src))))]
    elif roll < 0.62:
        out = [_Insn(bytes((0x03, _modrm(1, r, 5), _local(rng))))]
    elif roll < 0.66:
        out = [_Insn(bytes((0x33, _modrm(3, r, r))))]
    elif roll < 0.76:
        cmp = bytes((0x85, _modrm(3, src, src))) if rng.random() < 0.5 else bytes((0x3B, _modrm(3, src, r)))
        out = [_Insn(cmp), _Insn(bytes((0x70 + rng.randrange(16), 0)), "jcc")]
    elif roll < 0.80:
        out = [_Insn(bytes((0x50 + src,))), _Insn(bytes((0x6A, rng.randrange(0, 0x40)))),
               _Insn(b"\xe8\x00\x00\x00\x00", "call")]
    elif roll < 0.84:
        out = [_Insn(bytes((0x68,)) + struct.pack("<I", _kernel_addr(rng))),
               _Insn(b"\xff\x15" + struct.pack("<I", _kernel_addr(rng)))]
    elif roll < 0.87:
        out = [_Insn(bytes((0x50 + src,))), _Insn(bytes((0x58 + r,)))]
    elif roll < 0.90:
        out = [_Insn(bytes((0xEB, 0)), "jcc")]
    elif roll < 0.93:
        out = [_Insn(bytes((0x89, _modrm(1, r, rng.choice((ESI, EDI, EBX))), rng.randrange(0, 32, 4))))]
    elif roll < 0.96:
        out = [_Insn(bytes((0x8A, _modrm(1, r & 3, 5), _local(rng))))]
    elif roll < 0.98:
        out = [_Insn(bytes((0x85, _modrm(3, r, r)))), _Insn(bytes((0x0F, 0x80 + rng.randrange(16), 0, 0, 0, 0)), "jcc32")]
    else:
        out = [_Insn(b"\x90")]
    for ins in out:
        if ins.code[0] in (0x8B, 0xB8 + r, 0x03, 0x33, 0x8A) or ins.code[0] in _ALU:
            live.append(r)
    del live[:-3]
    return out


def _function(rng: random.Random, start: int, size: int, earlier: list[int]) -> bytes:
    saved = rng.sample(_SAVED, rng.randrange(0, 4))
    head = [_Insn(b"\x55\x8b\xec")] + [_Insn(bytes((s,))) for s in saved]
    tail = [_Insn(bytes((s + 8,))) for s in reversed(saved)]
    tail.append(_Insn(b"\xc9\xc3" if rng.random() < 0.5 else b"\x8b\xe5\x5d\xc3"))
    fixed = sum(len(i.code) for i in head + tail)
    body: list[_Insn] = []
    live: list[int] = []
    used = fixed
    while True:
        nxt = _body_insn(rng, live)
        need = sum(len(i.code) for i in nxt)
        if used + need > size:
            break
        body.extend(nxt)
        used += need
    insns = head + body + tail
    offs = []
    pos = start
    for ins in insns:
        offs.append(pos)
        pos += len(ins.code)
    out = bytearray()
    for k, ins in enumerate(insns):
        code = bytearray(ins.code)
        here = offs[k]
        if ins.fix == "jcc":
            nxt_off = here + 2
            cands = [o for o in offs if -128 <= o - nxt_off <= 127 and o != here]
            code[1] = (rng.choice(cands) - nxt_off) & 0xFF if cands else 0
        elif ins.fix == "jcc32":
            cands = [o for o in offs if o != here]
            code[2:6] = struct.pack("<i", rng.choice(cands) - (here + 6))
        elif ins.fix == "call":
            target = rng.choice(earlier) if earlier else start
            code[1:5] = struct.pack("<i", target - (here + 5))
        out += code
    return bytes(out)


def generate_code(size: int, seed: int) -> bytes:
    """Subset-only code: functions with prolog/epilog, branches and calls, CC padding."""
    rng = random.Random(f"code:{seed}")
    out = bytearray()
    starts: list[int] = []
    while size - len(out) >= 96:
        target = min(rng.randrange(110, 231), size - len(out))
        fn = _function(rng, len(out), target, starts)
        starts.append(len(out))
        out += fn
        pad = min(-len(out) % 16, size - len(out))
        out += b"\xcc" * pad
    out += b"\xcc" * (size - len(out))
    return bytes(out)


_WORDS = (
    "the of and to in is that for it as was with be by on not he this are or his from at which but "
    "have an they you were her she there been one all we their has would when if so no what up out "
    "who said will more about into them can only other time new some could these two may first then "
    "do any like my now over such our man me even most made after also did many before must through "
    "back years where much your way well down should because each just those people how too little "
    "state good very make world still own see men work long get here between both life being under "
    "never day same another know while last might us great old year off come since against go came "
    "right used take three driver memory system kernel process thread module file device service "
    "registry object handle buffer request status error value table list entry address page stack"
).split()


def generate_text(size: int, seed: int) -> bytes:
    rng = random.Random(f"text:{seed}")
    parts: list[str] = []
    length = 0
    sentence = 0
    while length <= size:  # the join uses one space fewer than counted
        w = rng.choice(_WORDS)
        if sentence == 0:
            w = w.capitalize()
        sentence += 1
        if sentence > rng.randrange(6, 18):
            w += rng.choice((".", ".", ".", "?", "!")) + ("\r\n" if rng.random() < 0.2 else "")
            sentence = 0
        elif rng.random() < 0.08:
            w += ","
        parts.append(w)
        length += len(w) + 1
    return " ".join(parts).encode("ascii")[:size]


def generate_payload(size: int, kind: str, seed: int) -> bytes:
    """Deterministic payload bytes of the requested kind."""
    if size < MIN_PAYLOAD:
        raise ValueError(f"payload size must be at least {MIN_PAYLOAD} bytes")
    if kind == "code":
        return generate_code(size, seed)
    if kind == "text":
        return generate_text(size, seed)
    if kind == "random":
        return random.Random(f"random:{seed}").randbytes(size)
    raise ValueError(f"unknown payload kind {kind!r}")


def make_pe_header(seed: int = 0, sections: int = 3) -> bytes:
    """A 0x400-byte i386 PE header: MZ, DOS stub, PE signature, section table."""
    rng = random.Random(f"pe:{seed}")
    hdr = bytearray(HEADER_LEN)
    hdr[0:2] = b"MZ"
    struct.pack_into("<HHHH", hdr, 2, 0x90, 3, 0, 4)
    struct.pack_into("<I", hdr, 0x3C, 0x80)
    stub = b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21" + DOS_STUB + b".\r\r\n$"
    hdr[0x40 : 0x40 + len(stub)] = stub
    hdr[0x80:0x84] = PE_MAGIC
    struct.pack_into("<HHIIIHH", hdr, 0x84, 0x14C, sections, rng.randrange(1 << 31), 0, 0, 0xE0, 0x10E)
    opt = 0x98
    struct.pack_into("<HBB", hdr, opt, 0x10B, 14, 0)
    struct.pack_into("<I", hdr, opt + 28, 0x10000)  # image base
    struct.pack_into("<II", hdr, opt + 32, 0x1000, 0x200)
    table = opt + 0xE0
    for i, name in enumerate((b".text", b".data", b".reloc", b"INIT", b"PAGE")[:sections]):
        at = table + 40 * i
        hdr[at : at + 8] = name.ljust(8, b"\x00")
        struct.pack_into("<IIII", hdr, at + 8, 0x1000 * (i + 1), 0x1000 * (i + 1), 0x1000, 0x400 * (i + 1))
        struct.pack_into("<I", hdr, at + 36, 0x60000020 if i == 0 else 0xC0000040)
    return bytes(hdr)


def make_image(size: int, kind: str, seed: int, header: bool = True) -> bytes:
    """Payload optionally prefixed by a synthetic PE header; ``size`` includes the header."""
    if not header:
        return generate_payload(size, kind, seed)
    if size < HEADER_LEN + MIN_PAYLOAD:
        raise ValueError("image too small for a header")
    return make_pe_header(seed) + generate_payload(size - HEADER_LEN, kind, seed)


CORPUS_CLASSES = ("Zero", "Text", "Code", "Encrypted")


def labeled_windows(per_class: int, seed: int, window_len: int = 256) -> list[tuple[bytes, str]]:
    """Windows sliced at random offsets from fresh payloads of each class."""
    rng = random.Random(f"corpus:{seed}")
    out: list[tuple[bytes, str]] = []
    out += [(bytes(window_len), "Zero")] * per_class
    for kind, label in (("text", "Text"), ("code", "Code"), ("random", "Encrypted")):
        blob = generate_payload(max(64 * window_len, per_class * window_len // 4), kind, rng.randrange(1 << 30))
        for _ in range(per_class):
            at = rng.randrange(0, len(blob) - window_len + 1)
            out.append((blob[at : at + window_len], label))
    return out
