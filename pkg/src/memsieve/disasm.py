"""Linear-sweep decoding of a 32-bit x86 subset and code-shape statistics.

Supported encodings::

    50-5F        push/pop r32          68 / 6A      push imm32 / imm8
    88-8B        mov with ModRM        B8-BF        mov r32, imm32
    00-3B        add/or/adc/sbb/and/sub/xor/cmp, ModRM forms only
    84 / 85      test                  70-7F        jcc rel8
    0F 80-8F     jcc rel32             E8 / E9 / EB call rel32, jmp rel32/rel8
    C3 / C2      ret, ret imm16        C9 leave     90 nop     CC int3
    FF /2, /4    call / jmp r/m32

Anything else decodes as a one-byte ``unknown``. Operand- and address-size
prefixes (66, 67) are unknown and force the following byte to unknown too.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)
REG_NAMES = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")

PROLOG = b"\x55\x8b\xec"
EPILOGS = (b"\xc9\xc3", b"\x5d\xc3")


class Mnemonic(str, enum.Enum):
    PUSH = "push"
    POP = "pop"
    MOV = "mov"
    ARITH = "arith"
    CMP_TEST = "cmp_test"
    JCC = "jcc"
    JMP = "jmp"
    CALL = "call"
    RET = "ret"
    LEAVE = "leave"
    NOP = "nop"
    INT3 = "int3"
    XOR = "xor"
    UNKNOWN = "unknown"


BRANCHES = frozenset({Mnemonic.JCC, Mnemonic.JMP, Mnemonic.CALL, Mnemonic.RET})


@dataclass(frozen=True, slots=True)
class DecodedInstr:
    offset: int
    length: int
    mnemonic_class: Mnemonic
    writes_reg: int | None = None
    reads_regs: frozenset[int] = frozenset()
    branch_target: int | None = None

    @property
    def end(self) -> int:
        return self.offset + self.length


# opcode kinds shared by the scalar decoder and the batch sweep
K_UNKNOWN, K_FIXED, K_MODRM, K_TWOBYTE, K_GRP5, K_PREFIX = range(6)

OPCODE_KIND = np.zeros(256, dtype=np.int8)
FIXED_LEN = np.ones(256, dtype=np.int8)
for _op in range(0x00, 0x3C):
    if _op & 7 < 4:
        OPCODE_KIND[_op] = K_MODRM
for _op in (0x84, 0x85, 0x88, 0x89, 0x8A, 0x8B):
    OPCODE_KIND[_op] = K_MODRM
for _op, _len in (
    *((o, 1) for o in range(0x50, 0x60)),
    (0x68, 5),
    (0x6A, 2),
    *((o, 2) for o in range(0x70, 0x80)),
    (0x90, 1),
    *((o, 5) for o in range(0xB8, 0xC0)),
    (0xC2, 3),
    (0xC3, 1),
    (0xC9, 1),
    (0xCC, 1),
    (0xE8, 5),
    (0xE9, 5),
    (0xEB, 2),
):
    OPCODE_KIND[_op] = K_FIXED
    FIXED_LEN[_op] = _len
OPCODE_KIND[0x0F] = K_TWOBYTE
OPCODE_KIND[0xFF] = K_GRP5
OPCODE_KIND[0x66] = K_PREFIX
OPCODE_KIND[0x67] = K_PREFIX


def _modrm_tables():
    base = np.zeros(256, dtype=np.int8)
    sib_disp = np.zeros(256, dtype=bool)
    for m in range(256):
        mod, rm = m >> 6, m & 7
        if mod == 3:
            base[m] = 1
            continue
        n = 1
        if rm == 4:
            n += 1
            sib_disp[m] = mod == 0
        elif rm == 5 and mod == 0:
            n += 4
        n += {0: 0, 1: 1, 2: 4}[mod]
        base[m] = n
    return base, sib_disp


# bytes consumed by ModRM (+SIB, +displacement); SIB with base=101 under mod=00 adds disp32
MODRM_LEN, MODRM_SIB_DISP = _modrm_tables()


class DisasmError(ValueError):
    pass


def _s8(b: int) -> int:
    return b - 256 if b & 0x80 else b


def _s32(data, i: int) -> int:
    v = data[i] | data[i + 1] << 8 | data[i + 2] << 16 | data[i + 3] << 24
    return v - (1 << 32) if v & 0x80000000 else v


def _unknown(offset: int) -> DecodedInstr:
    return DecodedInstr(offset, 1, Mnemonic.UNKNOWN)


def _modrm(data, offset: int):
    """Decode the ModRM operand at ``offset + 1``.

    Returns ``(length_after_opcode, rm_reg, reg_field, address_regs)``, with
    ``rm_reg`` None for memory operands, or None when truncated.
    """
    n = len(data)
    if offset + 1 >= n:
        return None
    m = data[offset + 1]
    mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
    length = int(MODRM_LEN[m])
    if mod == 3:
        return length, rm, reg, frozenset()
    addr: set[int] = set()
    if rm == 4:
        if offset + 2 >= n:
            return None
        sib = data[offset + 2]
        index, sbase = (sib >> 3) & 7, sib & 7
        if index != 4:
            addr.add(index)
        if sbase == 5 and mod == 0:
            length += 4
        else:
            addr.add(sbase)
    elif not (rm == 5 and mod == 0):
        addr.add(rm)
    if offset + 1 + length > n:
        return None
    return length, None, reg, frozenset(addr)


def _decode_modrm_op(data, offset: int, op: int) -> DecodedInstr:
    parsed = _modrm(data, offset)
    if parsed is None:
        return _unknown(offset)
    mlen, rm_reg, reg, addr = parsed
    length = 1 + mlen
    wide = op & 1
    # 8-bit forms touch the low/high byte of the first four registers
    reg_id = reg if wide else reg & 3
    rm_id = None if rm_reg is None else (rm_reg if wide else rm_reg & 3)

    if op in (0x84, 0x85):
        reads = set(addr) | {reg_id}
        if rm_id is not None:
            reads.add(rm_id)
        return DecodedInstr(offset, length, Mnemonic.CMP_TEST, None, frozenset(reads))

    to_reg = bool(op & 2)
    dest = reg_id if to_reg else rm_id
    src = rm_id if to_reg else reg_id
    reads = set(addr)
    if src is not None:
        reads.add(src)

    if op >= 0x88:
        if dest is not None and not wide:
            reads.add(dest)
        return DecodedInstr(offset, length, Mnemonic.MOV, dest, frozenset(reads))

    group = op >> 3
    if group == 7:
        if dest is not None:
            reads.add(dest)
        return DecodedInstr(offset, length, Mnemonic.CMP_TEST, None, frozenset(reads))
    cls = Mnemonic.XOR if group == 6 else Mnemonic.ARITH
    zeroing = group in (5, 6) and wide and rm_id is not None and rm_id == reg_id
    if zeroing:
        reads = set()
    elif dest is not None:
        reads.add(dest)
    return DecodedInstr(offset, length, cls, dest, frozenset(reads))


def decode(data, offset: int = 0) -> DecodedInstr:
    n = len(data)
    if not 0 <= offset < n:
        raise IndexError(f"offset {offset} outside view of length {n}")
    op = data[offset]
    kind = OPCODE_KIND[op]

    if kind == K_FIXED:
        length = int(FIXED_LEN[op])
        if offset + length > n:
            return _unknown(offset)
        if op < 0x58:
            return DecodedInstr(offset, 1, Mnemonic.PUSH, ESP, frozenset({op - 0x50, ESP}))
        if op < 0x60:
            return DecodedInstr(offset, 1, Mnemonic.POP, op - 0x58, frozenset({ESP}))
        if op in (0x68, 0x6A):
            return DecodedInstr(offset, length, Mnemonic.PUSH, ESP, frozenset({ESP}))
        if 0x70 <= op <= 0x7F:
            target = offset + 2 + _s8(data[offset + 1])
            return DecodedInstr(offset, 2, Mnemonic.JCC, branch_target=target)
        if 0xB8 <= op <= 0xBF:
            return DecodedInstr(offset, 5, Mnemonic.MOV, op - 0xB8)
        if op == 0xE8:
            target = offset + 5 + _s32(data, offset + 1)
            return DecodedInstr(offset, 5, Mnemonic.CALL, ESP, frozenset({ESP}), target)
        if op == 0xE9:
            return DecodedInstr(offset, 5, Mnemonic.JMP, branch_target=offset + 5 + _s32(data, offset + 1))
        if op == 0xEB:
            return DecodedInstr(offset, 2, Mnemonic.JMP, branch_target=offset + 2 + _s8(data[offset + 1]))
        if op in (0xC2, 0xC3):
            return DecodedInstr(offset, length, Mnemonic.RET, ESP, frozenset({ESP}))
        if op == 0xC9:
            return DecodedInstr(offset, 1, Mnemonic.LEAVE, ESP, frozenset({EBP}))
        if op == 0x90:
            return DecodedInstr(offset, 1, Mnemonic.NOP)
        return DecodedInstr(offset, 1, Mnemonic.INT3)

    if kind == K_MODRM:
        return _decode_modrm_op(data, offset, op)

    if kind == K_TWOBYTE:
        if offset + 1 < n and 0x80 <= data[offset + 1] <= 0x8F and offset + 6 <= n:
            target = offset + 6 + _s32(data, offset + 2)
            return DecodedInstr(offset, 6, Mnemonic.JCC, branch_target=target)
        return _unknown(offset)

    if kind == K_GRP5:
        parsed = _modrm(data, offset)
        if parsed is None:
            return _unknown(offset)
        mlen, rm_reg, reg, addr = parsed
        if reg not in (2, 4):
            return _unknown(offset)
        reads = set(addr)
        if rm_reg is not None:
            reads.add(rm_reg)
        if reg == 2:
            return DecodedInstr(offset, 1 + mlen, Mnemonic.CALL, ESP, frozenset(reads | {ESP}))
        return DecodedInstr(offset, 1 + mlen, Mnemonic.JMP, None, frozenset(reads))

    return _unknown(offset)


def _as_bytes(data) -> bytes:
    if isinstance(data, np.ndarray):
        return data.astype(np.uint8, copy=False).tobytes()
    return bytes(data)


def linear_sweep(data) -> tuple[list[DecodedInstr], float]:
    """Decode from offset 0, consuming each instruction's length.

    Returns the instruction list and the fraction of bytes covered by
    recognised (non-unknown) instructions.
    """
    buf = _as_bytes(data)
    n = len(buf)
    if n == 0:
        raise DisasmError("empty view")
    out = []
    pos = 0
    valid = 0
    forced = False
    while pos < n:
        ins = _unknown(pos) if forced else decode(buf, pos)
        forced = OPCODE_KIND[buf[pos]] == K_PREFIX
        if ins.mnemonic_class is not Mnemonic.UNKNOWN:
            valid += ins.length
        out.append(ins)
        pos += ins.length
    return out, valid / n


def valid_byte_ratio_batch(mat: np.ndarray) -> np.ndarray:
    """Linear-sweep valid-byte ratio for every row of a window matrix.

    All rows are swept in lockstep using the same opcode tables as
    :func:`decode`; results equal ``linear_sweep(row)[1]`` exactly.
    """
    rows, n = mat.shape
    if rows == 0:
        return np.zeros(0)
    padded = np.zeros((rows, n + 8), dtype=np.uint8)
    padded[:, :n] = mat
    flat = padded.ravel()
    stride = n + 8
    pos = np.zeros(rows, dtype=np.int64)
    covered = np.zeros(rows, dtype=np.int64)
    forced = np.zeros(rows, dtype=bool)
    active = np.arange(rows)
    while active.size:
        p = pos[active]
        at = active * stride + p
        op = flat[at]
        kind = OPCODE_KIND[op]
        b1 = flat[at + 1]
        b2 = flat[at + 2]
        length = FIXED_LEN[op].astype(np.int64)
        valid = kind == K_FIXED
        modrm_len = 1 + MODRM_LEN[b1].astype(np.int64) + 4 * (MODRM_SIB_DISP[b1] & ((b2 & 7) == 5))
        is_modrm = (kind == K_MODRM) | ((kind == K_GRP5) & np.isin((b1 >> 3) & 7, (2, 4)))
        length = np.where(is_modrm, modrm_len, length)
        valid |= is_modrm
        is_jcc32 = (kind == K_TWOBYTE) & (b1 >= 0x80) & (b1 <= 0x8F)
        length = np.where(is_jcc32, 6, length)
        valid |= is_jcc32
        valid &= (p + length <= n) & ~forced[active]
        length = np.where(valid, length, 1)
        covered[active] += np.where(valid, length, 0)
        forced[active] = kind == K_PREFIX
        pos[active] = p + length
        active = active[pos[active] < n]
    return covered / n


def mnemonic_histogram(instrs) -> dict[str, int]:
    counts = Counter(i.mnemonic_class.value for i in instrs)
    return {m.value: counts.get(m.value, 0) for m in Mnemonic}


def prolog_epilog_density(data) -> float:
    """Prolog (55 8B EC) plus epilog (C9 C3, 5D C3) occurrences per KiB."""
    buf = _as_bytes(data)
    if not buf:
        raise DisasmError("empty view")
    hits = 0
    for pat in (PROLOG, *EPILOGS):
        pos = buf.find(pat)
        while pos != -1:
            hits += 1
            pos = buf.find(pat, pos + 1)
    return hits * 1024.0 / len(buf)


_TRACK_RESET = BRANCHES | {Mnemonic.UNKNOWN, Mnemonic.INT3}


def dead_write_ratio(instrs) -> float:
    """Fraction of register writes overwritten before any read of that register.

    Tracking restarts at every branch, call, return, int3 and unknown byte.
    """
    writers = 0
    dead = 0
    pending: set[int] = set()
    for ins in instrs:
        if ins.mnemonic_class in _TRACK_RESET:
            pending.clear()
            continue
        pending.difference_update(ins.reads_regs)
        if ins.writes_reg is not None:
            writers += 1
            if ins.writes_reg in pending:
                dead += 1
            pending.add(ins.writes_reg)
    return dead / writers if writers else 0.0


@dataclass
class Cfg:
    blocks: list[tuple[int, int]]
    edges: list[tuple[int, int, str]]
    dangling_targets: int = 0


def _ends_block(ins: DecodedInstr) -> bool:
    return ins.mnemonic_class in BRANCHES


def build_cfg(instrs, base: int = 0) -> Cfg:
    """Basic blocks and fall/jump/call edges over a linear-sweep listing."""
    if not instrs:
        return Cfg([], [])
    starts = {i.offset for i in instrs}
    end = instrs[-1].end
    leaders = {instrs[0].offset}
    dangling = 0
    for k, ins in enumerate(instrs):
        if _ends_block(ins) and k + 1 < len(instrs):
            leaders.add(instrs[k + 1].offset)
        t = ins.branch_target
        if t is not None:
            if t in starts:
                leaders.add(t)
            else:
                dangling += 1
    order = sorted(leaders)
    index = {off: i for i, off in enumerate(order)}
    bounds = list(zip(order, order[1:] + [end]))
    blocks = [(s + base, e + base) for s, e in bounds]

    edges: list[tuple[int, int, str]] = []
    by_end = {}
    for ins in instrs:
        by_end[ins.end] = ins
    for bi, (s, e) in enumerate(bounds):
        last = by_end[e]
        nxt = bi + 1 if bi + 1 < len(bounds) else None
        cls = last.mnemonic_class
        target_block = index.get(last.branch_target) if last.branch_target is not None else None
        if cls is Mnemonic.RET:
            continue
        if cls is Mnemonic.JMP:
            if target_block is not None:
                edges.append((bi, target_block, "jump"))
            continue
        if cls is Mnemonic.JCC:
            if nxt is not None:
                edges.append((bi, nxt, "fall"))
            if target_block is not None:
                edges.append((bi, target_block, "jump"))
            continue
        if cls is Mnemonic.CALL:
            if target_block is not None:
                edges.append((bi, target_block, "call"))
            if nxt is not None:
                edges.append((bi, nxt, "fall"))
            continue
        if nxt is not None:
            edges.append((bi, nxt, "fall"))
    return Cfg(blocks, edges, dangling)


def branch_target_ratio(instrs) -> float:
    """Share of relative branches landing on a decoded instruction boundary."""
    starts = {i.offset for i in instrs}
    targets = [i.branch_target for i in instrs if i.branch_target is not None]
    if not targets:
        return 0.0
    return sum(t in starts for t in targets) / len(targets)


@dataclass(frozen=True)
class CodeWeights:
    valid_bytes: float = 0.25
    prolog: float = 0.35
    live_writes: float = 0.10
    branch_targets: float = 0.20
    pointers: float = 0.10
    prolog_saturation: float = 4.0
    threshold: float = 0.5

    def __post_init__(self) -> None:
        w = (self.valid_bytes, self.prolog, self.live_writes, self.branch_targets, self.pointers)
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("code_likelihood weights must be non-negative and sum to 1")


DEFAULT_WEIGHTS = CodeWeights()
MIN_CODE_VIEW = 64


@dataclass(frozen=True)
class CodeEvidence:
    valid_byte_ratio: float
    prolog_density: float
    dead_write_ratio: float
    branch_target_ratio: float
    kernel_pointer_density: float
    score: float = field(default=0.0)


def code_evidence(data, weights: CodeWeights = DEFAULT_WEIGHTS) -> CodeEvidence:
    from .signatures import kernel_pointer_density

    buf = _as_bytes(data)
    if len(buf) < MIN_CODE_VIEW:
        raise DisasmError(f"view shorter than {MIN_CODE_VIEW} bytes")
    instrs, valid = linear_sweep(buf)
    prolog = prolog_epilog_density(buf)
    dead = dead_write_ratio(instrs)
    branch = branch_target_ratio(instrs)
    kpd = kernel_pointer_density(buf)
    score = (
        weights.valid_bytes * valid
        + weights.prolog * min(1.0, prolog / weights.prolog_saturation)
        + weights.live_writes * (1.0 - dead)
        + weights.branch_targets * branch
        + weights.pointers * kpd
    )
    return CodeEvidence(valid, prolog, dead, branch, kpd, score)


def code_likelihood(data, weights: CodeWeights = DEFAULT_WEIGHTS) -> float:
    """Convex fusion of disassembly evidence into a [0, 1] code score."""
    return code_evidence(data, weights).score
