"""Synthetic dumps with ground truth: low-entropy block insertion, header wiping, XOR, layouts."""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import HEADER_LEN, PAYLOAD_KINDS, generate_text, make_image
from .dump import DumpError, ManifestEntry, MemoryDump, RegionManifest, byte_histogram
from .stats import shannon_entropy

MAX_IMAGE_SIZE = 10 * 1024 * 1024
MIN_ENTROPY_REDUCTION = 2.0
FILLERS = ("zeros", "random", "text")
PRESETS = ("clean", "zeus", "highstem")
MIB = 1 << 20


class EvasionError(ValueError):
    pass


@dataclass(frozen=True)
class EvasionSpec:
    insert_block_count: int = 0
    block_len_range: tuple[int, int] = (512, 2048)
    block_alphabet_size: int = 1
    wipe_pe_header: bool = False
    xor_key: int | None = None
    rng_seed: int = 0
    block_values: tuple[int, ...] | None = None  # fixed alphabet instead of a random draw

    def __post_init__(self) -> None:
        lo, hi = self.block_len_range
        if self.insert_block_count < 0:
            raise EvasionError("insert_block_count must be >= 0")
        if not 1 <= lo <= hi:
            raise EvasionError("block_len_range needs 1 <= min <= max")
        if not 1 <= self.block_alphabet_size <= 256:
            raise EvasionError("block_alphabet_size must lie in [1, 256]")
        if self.xor_key is not None and not 0 <= self.xor_key <= 255:
            raise EvasionError("xor_key must be a byte")
        if self.block_values is not None:
            vals = tuple(self.block_values)
            if len(set(vals)) != len(vals) or len(vals) != self.block_alphabet_size:
                raise EvasionError("block_values must list block_alphabet_size distinct bytes")
            if any(not 0 <= v <= 255 for v in vals):
                raise EvasionError("block_values must be bytes")

    def max_growth(self) -> int:
        return self.insert_block_count * self.block_len_range[1]


@dataclass
class GroundTruth:
    payload_spans: list[tuple[int, int]]
    inserted_spans: list[tuple[int, int]]
    original_entropy_bits: float
    evaded_entropy_bits: float

    def shifted(self, delta: int) -> "GroundTruth":
        return replace(
            self,
            payload_spans=[(s + delta, n) for s, n in self.payload_spans],
            inserted_spans=[(s + delta, n) for s, n in self.inserted_spans],
        )

    @property
    def extent(self) -> tuple[int, int]:
        spans = self.payload_spans + self.inserted_spans
        start = min(s for s, _ in spans)
        end = max(s + n for s, n in spans)
        return start, end - start


def _entropy(data: bytes) -> float:
    return shannon_entropy(byte_histogram(data)) if data else 0.0


def apply_evasion(payload: bytes, spec: EvasionSpec) -> tuple[bytes, GroundTruth]:
    """Wipe the header, XOR, then splice single- or few-valued blocks between payload fragments."""
    if spec.insert_block_count and not payload:
        raise EvasionError("cannot insert blocks into an empty payload")
    original = _entropy(payload)
    body = bytearray(payload)
    if spec.wipe_pe_header:
        body[: min(HEADER_LEN, len(body))] = bytes(min(HEADER_LEN, len(body)))
    if spec.xor_key is not None:
        arr = np.frombuffer(bytes(body), dtype=np.uint8) ^ np.uint8(spec.xor_key)
        body = bytearray(arr.tobytes())
    rng = np.random.default_rng(spec.rng_seed)
    count = spec.insert_block_count
    cuts = np.sort(rng.integers(0, len(body) + 1, count)) if count else np.empty(0, dtype=np.int64)
    lo, hi = spec.block_len_range
    lengths = rng.integers(lo, hi + 1, count)
    if spec.block_values is not None:
        alphabet = np.array(spec.block_values, dtype=np.uint8)
    else:
        alphabet = rng.choice(256, spec.block_alphabet_size, replace=False).astype(np.uint8)
    out = bytearray()
    payload_spans: list[tuple[int, int]] = []
    inserted: list[tuple[int, int]] = []
    prev = 0
    for cut, length in zip(cuts.tolist(), lengths.tolist()):
        if cut > prev:
            payload_spans.append((len(out), cut - prev))
            out += body[prev:cut]
            prev = cut
        block = alphabet[rng.integers(0, len(alphabet), length)]
        inserted.append((len(out), length))
        out += block.tobytes()
    if prev < len(body):
        payload_spans.append((len(out), len(body) - prev))
        out += body[prev:]
    evaded = bytes(out)
    return evaded, GroundTruth(payload_spans, inserted, original, _entropy(evaded))


@dataclass(frozen=True)
class ConstraintReport:
    size_bytes: int
    entropy_ratio: float
    size_ok: bool
    entropy_ok: bool

    @property
    def passed(self) -> bool:
        return self.size_ok and self.entropy_ok


def verify_constraints(evaded: bytes, truth: GroundTruth) -> ConstraintReport:
    """Image at most 10 MiB and whole-image entropy at least halved."""
    size = len(evaded)
    if truth.evaded_entropy_bits == 0.0:
        ratio = float("inf") if truth.original_entropy_bits > 0 else 1.0
    else:
        ratio = truth.original_entropy_bits / truth.evaded_entropy_bits
    return ConstraintReport(size, ratio, size <= MAX_IMAGE_SIZE, ratio >= MIN_ENTROPY_REDUCTION)


# -- dump recipes ------------------------------------------------------------


@dataclass(frozen=True)
class ImageSpec:
    name: str
    kind: str = "code"
    size: int = 32 * 1024
    offset: int = 0
    declared: bool = True
    header: bool = True
    seed: int = 0
    evasion: EvasionSpec = field(default_factory=EvasionSpec)

    def __post_init__(self) -> None:
        if self.kind not in PAYLOAD_KINDS:
            raise EvasionError(f"{self.name}: unknown payload kind {self.kind!r}")
        if self.offset < 0:
            raise EvasionError(f"{self.name}: negative offset")


@dataclass(frozen=True)
class DumpRecipe:
    images: tuple[ImageSpec, ...]
    filler: str = "zeros"
    total_size: int = 64 * MIB
    seed: int = 0
    base_address: int = 0x80000000

    def __post_init__(self) -> None:
        if self.filler not in FILLERS:
            raise EvasionError(f"unknown filler {self.filler!r}")
        if self.total_size <= 0:
            raise EvasionError("total_size must be positive")
        names = [im.name for im in self.images]
        if len(set(names)) != len(names):
            raise EvasionError("image names must be unique")


@dataclass
class ImageTruth:
    name: str
    start: int
    length: int
    declared: bool
    truth: GroundTruth

    @property
    def end(self) -> int:
        return self.start + self.length


def _filler(kind: str, size: int, seed: int) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(size, dtype=np.uint8)
    if kind == "random":
        return np.random.default_rng([seed, 0xF111]).integers(0, 256, size, dtype=np.uint8)
    unit = np.frombuffer(generate_text(min(size, 1 << 18), seed), dtype=np.uint8)
    return np.resize(unit, size)


def build_image(spec: ImageSpec) -> tuple[bytes, GroundTruth]:
    payload = make_image(spec.size, spec.kind, spec.seed, spec.header)
    return apply_evasion(payload, spec.evasion)


def build_dump(recipe: DumpRecipe) -> tuple[MemoryDump, RegionManifest, list[ImageTruth]]:
    """Lay images over the filler; only declared images enter the manifest."""
    arr = _filler(recipe.filler, recipe.total_size, recipe.seed)
    placed: list[ImageTruth] = []
    for spec in recipe.images:
        image, truth = build_image(spec)
        end = spec.offset + len(image)
        if end > recipe.total_size:
            raise EvasionError(f"{spec.name}: image ends at 0x{end:x}, past dump size")
        for other in placed:
            if spec.offset < other.end and other.start < end:
                raise EvasionError(f"{spec.name} overlaps {other.name}")
        arr[spec.offset : end] = np.frombuffer(image, dtype=np.uint8)
        placed.append(ImageTruth(spec.name, spec.offset, len(image), spec.declared, truth.shifted(spec.offset)))
    manifest = RegionManifest(
        tuple(ManifestEntry(t.name, t.start, t.length, "driver") for t in placed if t.declared)
    )
    dump = MemoryDump(arr, base_address=recipe.base_address, source_id=f"recipe-{recipe.seed}")
    return dump, manifest, placed


# -- presets -----------------------------------------------------------------


def zeus_spec(seed: int) -> EvasionSpec:
    return EvasionSpec(16, (4096, 16384), 1, False, None, seed, (0x00,))


def highstem_spec(seed: int) -> EvasionSpec:
    return EvasionSpec(512, (512, 2048), 2, True, None, seed)


def _place(rng: random.Random, sizes: list[int], total: int) -> list[int]:
    """Page-aligned offsets in distinct slots with a guard gap between images."""
    slots = max(4, 2 * len(sizes))
    slot = total // slots
    gap = min(MIB, slot // 4)
    chosen = sorted(rng.sample(range(slots), len(sizes)))
    offsets = []
    for idx, size in zip(chosen, sizes):
        room = slot - size - gap
        if room < 0:
            raise EvasionError("dump too small for preset images")
        offsets.append(idx * slot + (rng.randrange(0, room + 1) & ~0xFFF))
    return offsets


def preset(name: str, seed: int = 0, total_size: int = 64 * MIB, filler: str = "zeros") -> DumpRecipe:
    """``clean``: declared images only. ``zeus``/``highstem``: plus one hidden evaded image."""
    if name not in PRESETS:
        raise EvasionError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    rng = random.Random(f"preset:{name}:{seed}")
    images = [ImageSpec("ntdrv", "code", 256 * 1024, seed=rng.randrange(1 << 30))]
    if name == "clean":
        images.append(ImageSpec("fsfilt", "code", 64 * 1024, seed=rng.randrange(1 << 30)))
    else:
        evasion = zeus_spec(rng.randrange(1 << 30)) if name == "zeus" else highstem_spec(rng.randrange(1 << 30))
        images.append(
            ImageSpec("hidden", "code", 33 * 1024, declared=False, seed=rng.randrange(1 << 30), evasion=evasion)
        )
    bounds = [im.size + im.evasion.max_growth() for im in images]
    offsets = _place(rng, bounds, total_size)
    images = [replace(im, offset=off) for im, off in zip(images, offsets)]
    return DumpRecipe(tuple(images), filler, total_size, seed)


# -- recipe files ------------------------------------------------------------

_IMAGE_KEYS = {
    "kind", "size", "offset", "declared", "header", "seed",
    "blocks", "block_len", "alphabet", "block_values", "wipe_pe_header", "xor_key", "evasion_seed",
}
_TOP_KEYS = {"filler", "total_size", "seed", "base_address"}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise EvasionError(f"not a boolean: {text!r}")


def recipe_to_text(recipe: DumpRecipe) -> str:
    lines = [
        f"filler = {recipe.filler}",
        f"total_size = 0x{recipe.total_size:x}",
        f"seed = {recipe.seed}",
        f"base_address = 0x{recipe.base_address:x}",
    ]
    for im in recipe.images:
        ev = im.evasion
        p = f"image.{im.name}."
        lines += [
            f"{p}kind = {im.kind}",
            f"{p}size = 0x{im.size:x}",
            f"{p}offset = 0x{im.offset:x}",
            f"{p}declared = {str(im.declared).lower()}",
            f"{p}header = {str(im.header).lower()}",
            f"{p}seed = {im.seed}",
            f"{p}blocks = {ev.insert_block_count}",
            f"{p}block_len = {ev.block_len_range[0]}-{ev.block_len_range[1]}",
            f"{p}alphabet = {ev.block_alphabet_size}",
            f"{p}wipe_pe_header = {str(ev.wipe_pe_header).lower()}",
            f"{p}xor_key = {'none' if ev.xor_key is None else f'0x{ev.xor_key:02x}'}",
            f"{p}evasion_seed = {ev.rng_seed}",
        ]
        if ev.block_values is not None:
            lines.append(f"{p}block_values = {','.join(f'{v:02x}' for v in ev.block_values)}")
    return "\n".join(lines) + "\n"


def parse_recipe(text: str) -> DumpRecipe:
    top: dict[str, str] = {}
    images: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EvasionError(f"recipe line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("image."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _IMAGE_KEYS:
                raise EvasionError(f"recipe line {lineno}: unknown key {key!r}")
            images.setdefault(parts[1], {})[parts[2]] = value
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise EvasionError(f"recipe line {lineno}: unknown key {key!r}")
    specs = []
    try:
        for name, kv in images.items():
            lo, _, hi = kv.get("block_len", "512-2048").partition("-")
            values = kv.get("block_values")
            xor = kv.get("xor_key", "none")
            ev = EvasionSpec(
                insert_block_count=int(kv.get("blocks", "0"), 0),
                block_len_range=(int(lo, 0), int(hi or lo, 0)),
                block_alphabet_size=int(kv.get("alphabet", "1"), 0),
                wipe_pe_header=_bool(kv.get("wipe_pe_header", "false")),
                xor_key=None if xor.lower() == "none" else int(xor, 0),
                rng_seed=int(kv.get("evasion_seed", "0"), 0),
                block_values=tuple(int(v, 16) for v in values.split(",")) if values else None,
            )
            specs.append(
                ImageSpec(
                    name=name,
                    kind=kv.get("kind", "code"),
                    size=int(kv.get("size", "0x8000"), 0),
                    offset=int(kv.get("offset", "0"), 0),
                    declared=_bool(kv.get("declared", "true")),
                    header=_bool(kv.get("header", "true")),
                    seed=int(kv.get("seed", "0"), 0),
                    evasion=ev,
                )
            )
        return DumpRecipe(
            tuple(specs),
            filler=top.get("filler", "zeros"),
            total_size=int(top.get("total_size", str(64 * MIB)), 0),
            seed=int(top.get("seed", "0"), 0),
            base_address=int(top.get("base_address", "0x80000000"), 0),
        )
    except ValueError as exc:
        if isinstance(exc, (EvasionError, DumpError)):
            raise
        raise EvasionError(f"bad recipe value: {exc}") from exc


def load_recipe(path: str | Path) -> DumpRecipe:
    return parse_recipe(Path(path).read_text(encoding="utf-8"))
