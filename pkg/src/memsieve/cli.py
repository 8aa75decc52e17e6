"""``memsieve`` command line: scan, generate, calibrate, crossview, visualize, bench, serve.

Exit codes: 0 success, 2 hidden code found (scan/crossview), 1 error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .classify import RegionLabel, RegionVerdict, calibrate, load_model, model_to_text, save_model
from .corpus import labeled_windows
from .dump import DumpError, WindowConfig, load_dump, load_manifest, parse_manifest
from .evasion import FILLERS, PRESETS, build_dump, load_recipe, preset, recipe_to_text
from .pipeline import ANALYSES, ScanConfig, bench, bench_csv, cross_view, run_scan
from .report import (render_byteplot, render_heatmap, render_hilbert, save_image, windows_csv_from_json,
                     write_report_json, write_windows_csv)
from .stats import SERIES_METRICS, entropy_series

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_HIDDEN = 2

log = logging.getLogger("memsieve")


@dataclass
class CliConfig:
    """Options shared by all subcommands; a config file supplies defaults, flags override."""

    window: int = 256
    stride: int = 252
    analyses: str = ""  # empty: every analysis for scan, stats only for bench
    mode: str = "full"
    model: str = ""
    signatures: str = ""
    manifest: str = ""
    workers: int = 1
    seed: int = 0
    preset: str = "highstem"
    size: int = 64 * 1024 * 1024
    filler: str = "zeros"
    metric: str = "shannon"
    width: int = 256
    order: int = 8
    min_run: int = 2
    confidence_threshold: float = 0.5
    min_hidden_len: int = 0
    base_address: int = 0
    bind: str = ""
    max_concurrent: int = 4
    log: str = ""
    report_dir: str = ""

    def validate(self) -> None:
        WindowConfig(self.window, self.stride)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.filler not in FILLERS:
            raise ValueError(f"filler must be one of {FILLERS}")
        if self.metric not in SERIES_METRICS:
            raise ValueError(f"metric must be one of {', '.join(sorted(SERIES_METRICS))}")
        if not 1 <= self.order <= 12 or self.width < 1:
            raise ValueError("order must be in 1..12 and width positive")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.scan_config()

    def scan_config(self) -> ScanConfig:
        return ScanConfig(
            window_len=self.window,
            stride=self.stride,
            analyses=frozenset(a for a in self.analyses.split(",") if a) or frozenset(ANALYSES),
            mode=self.mode,
            min_run=self.min_run,
            confidence_threshold=self.confidence_threshold,
            min_hidden_len=self.min_hidden_len,
            model_path=self.model,
            signatures_path=self.signatures,
        )


_FIELDS = {f.name: f for f in fields(CliConfig)}


def _coerce(name: str, text: str):
    kind = _FIELDS[name].type
    if kind == "int":
        return int(text, 0)
    if kind == "float":
        return float(text)
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key = value")
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def resolve_config(args: argparse.Namespace) -> CliConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = replace(CliConfig(), **values)
    cfg.validate()
    return cfg


def _int(text: str) -> int:
    return int(text, 0)


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    """Flags default to None so that config-file values survive unless overridden."""
    p.add_argument("--config", help="key = value config file")
    spec = {
        "window": (_int, "window length in bytes"),
        "stride": (_int, "window stride in bytes"),
        "analyses": (str, "comma-separated analyses"),
        "mode": (str, "full or baseline"),
        "model": (str, "classifier model file"),
        "signatures": (str, "signature file"),
        "manifest": (str, "declared-region manifest"),
        "workers": (int, "worker processes"),
        "seed": (int, "generator seed"),
        "preset": (str, f"one of {', '.join(PRESETS)}"),
        "size": (_int, "dump size in bytes"),
        "filler": (str, f"one of {', '.join(FILLERS)}"),
        "metric": (str, "series metric"),
        "width": (int, "image width in pixels"),
        "order": (int, "Hilbert curve order"),
        "min_run": (int, "minimum windows per region"),
        "confidence_threshold": (float, "cross-view confidence threshold"),
        "min_hidden_len": (_int, "shortest reported hidden region (0: two windows)"),
        "base_address": (_int, "virtual address of offset 0"),
        "bind": (str, "host:port (default from MDSA_BIND)"),
        "max_concurrent": (int, "concurrent connections"),
        "log": (str, "append-only request log"),
        "report_dir": (str, "directory for persisted reports"),
    }
    for name in names:
        kind, help_text = spec[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None, help=help_text)


_SCAN_OPTS = ("window", "stride", "analyses", "mode", "model", "signatures", "manifest", "workers",
              "min_run", "confidence_threshold", "min_hidden_len", "base_address")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memsieve", description="Statistical memory-dump analysis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="scan a dump; writes report.json and windows.csv")
    p.add_argument("dump")
    p.add_argument("-o", "--out", default=".", help="output directory")
    p.add_argument("--remote", help="host:port of a scan service")
    _add_common(p, *_SCAN_OPTS)

    p = sub.add_parser("generate", help="build a synthetic dump from a preset or recipe")
    p.add_argument("-o", "--out", required=True, help="dump file")
    p.add_argument("--recipe", help="recipe file (overrides --preset)")
    p.add_argument("--manifest-out", help="write the declared-image manifest here")
    p.add_argument("--truth-out", help="write ground truth JSON here")
    p.add_argument("--recipe-out", help="write the resolved recipe here")
    _add_common(p, "preset", "seed", "size", "filler")

    p = sub.add_parser("calibrate", help="fit interval thresholds and write a model file")
    p.add_argument("-o", "--out", required=True, help="model file")
    p.add_argument("--per-class", type=int, default=300, help="synthetic windows per class")
    p.add_argument("--sample", action="append", default=[], metavar="LABEL=PATH",
                   help="add every window of PATH as LABEL (repeatable)")
    p.add_argument("--k", type=float, default=3.0, help="interval half-width in standard deviations")
    _add_common(p, "seed", "window")

    p = sub.add_parser("crossview", help="re-run cross-view on an existing report")
    p.add_argument("report")
    _add_common(p, "manifest", "confidence_threshold", "min_hidden_len")

    p = sub.add_parser("visualize", help="render a heatmap, byte plot or Hilbert image")
    p.add_argument("dump")
    p.add_argument("-o", "--out", required=True, help="image file (.pgm/.ppm, or .png with Pillow)")
    p.add_argument("--kind", choices=("heatmap", "byteplot", "hilbert"), default="heatmap")
    _add_common(p, "window", "stride", "metric", "width", "order")

    p = sub.add_parser("bench", help="throughput per stage and worker count")
    p.add_argument("--dump", help="dump file (default: generated preset)")
    p.add_argument("--worker-counts", default=None, help="comma-separated, e.g. 1,2,4")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("-o", "--out", help="CSV file (default stdout)")
    _add_common(p, "workers", "preset", "seed", "size", "window", "stride", "analyses")

    p = sub.add_parser("serve", help="run the framed TCP scan service")
    _add_common(p, "bind", "max_concurrent", "workers", "log", "report_dir")
    return parser


def cmd_scan(args, cfg: CliConfig) -> int:
    scan_cfg = cfg.scan_config()
    manifest_text = Path(cfg.manifest).read_text(encoding="utf-8") if cfg.manifest else ""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.remote:
        from .service import request_scan

        dump = load_dump(args.dump, base_address=cfg.base_address)
        request = scan_cfg.to_dict() | {"manifest": manifest_text, "base_address": cfg.base_address,
                                         "source_id": dump.source_id}
        body = request_scan(args.remote, request, dump.data)
        (out / "report.json").write_text(body + "\n", encoding="utf-8")
        doc = json.loads(body)
        (out / "windows.csv").write_text(windows_csv_from_json(doc), encoding="utf-8")
        hidden = doc["summary"]["hidden_regions"]
        print(f"report: {out / 'report.json'} (remote)")
    else:
        dump = load_dump(args.dump, base_address=cfg.base_address)
        report = run_scan(dump, scan_cfg, workers=cfg.workers, manifest=parse_manifest(manifest_text))
        write_report_json(report, out / "report.json")
        write_windows_csv(report, out / "windows.csv")
        hidden = len(report.hidden)
        print(f"report: {out / 'report.json'}  windows: {len(report.offsets)}  regions: {len(report.regions)}")
    print(f"hidden regions: {hidden}")
    return EXIT_HIDDEN if hidden else EXIT_OK


def cmd_generate(args, cfg: CliConfig) -> int:
    recipe = load_recipe(args.recipe) if args.recipe else preset(cfg.preset, cfg.seed, cfg.size, cfg.filler)
    dump, manifest, truths = build_dump(recipe)
    Path(args.out).write_bytes(dump.data)
    if args.manifest_out:
        Path(args.manifest_out).write_text(manifest.to_text(), encoding="utf-8")
    if args.recipe_out:
        Path(args.recipe_out).write_text(recipe_to_text(recipe), encoding="utf-8")
    if args.truth_out:
        doc = [
            {
                "name": t.name,
                "start": t.start,
                "length": t.length,
                "declared": t.declared,
                "payload_spans": [list(s) for s in t.truth.payload_spans],
                "inserted_spans": [list(s) for s in t.truth.inserted_spans],
                "original_entropy_bits": t.truth.original_entropy_bits,
                "evaded_entropy_bits": t.truth.evaded_entropy_bits,
            }
            for t in truths
        ]
        Path(args.truth_out).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    print(f"{args.out}: {len(dump)} bytes, sha256 {dump.sha256()}")
    for t in truths:
        state = "declared" if t.declared else "hidden"
        print(f"  {t.name:10s} 0x{t.start:08x} +0x{t.length:x} {state}")
    return EXIT_OK


def cmd_calibrate(args, cfg: CliConfig) -> int:
    samples = labeled_windows(args.per_class, cfg.seed, cfg.window) if args.per_class else []
    for item in args.sample:
        label, sep, path = item.partition("=")
        if not sep:
            raise ValueError(f"--sample expects LABEL=PATH, got {item!r}")
        RegionLabel(label)
        data = Path(path).read_bytes()
        for at in range(0, len(data) - cfg.window + 1, cfg.window):
            samples.append((data[at : at + cfg.window], label))
    model = calibrate(samples, k=args.k)
    save_model(model, args.out)
    if model_to_text(load_model(args.out)) != model_to_text(model):
        raise RuntimeError("model file did not round-trip")
    print(f"{args.out}: classes {', '.join(c.value for c in model.classes)}")
    return EXIT_OK


def _region_from_json(d: dict) -> RegionVerdict:
    return RegionVerdict(d["start"], d["length"], RegionLabel(d["label"]), d["confidence"],
                         sorted(d.get("evidence", {}).items()), None)


def cmd_crossview(args, cfg: CliConfig) -> int:
    doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
    manifest = load_manifest(cfg.manifest) if cfg.manifest else parse_manifest("")
    regions = [_region_from_json(r) for r in doc["regions"]]
    floor = cfg.min_hidden_len or 2 * doc["config"]["window_len"]
    verdicts = cross_view(regions, manifest, doc["dump"]["length"], cfg.confidence_threshold, floor)
    hidden = [v for v in verdicts if v.hidden]
    for v in verdicts:
        tag = "HIDDEN" if v.hidden else "declared"
        print(f"0x{v.start:08x} +0x{v.length:x} {v.label.value:9s} {v.confidence:.3f} {tag}")
    print(f"hidden regions: {len(hidden)}")
    return EXIT_HIDDEN if hidden else EXIT_OK


def cmd_visualize(args, cfg: CliConfig) -> int:
    dump = load_dump(args.dump)
    if args.kind == "heatmap":
        pixels = render_heatmap(entropy_series(dump, WindowConfig(cfg.window, cfg.stride), cfg.metric), cfg.width)
    elif args.kind == "byteplot":
        pixels = render_byteplot(dump.array, cfg.width)
    else:
        pixels = render_hilbert(dump.array, cfg.order)
    save_image(pixels, args.out)
    print(f"{args.out}: {pixels.shape[1]}x{pixels.shape[0]}")
    return EXIT_OK


def cmd_bench(args, cfg: CliConfig) -> int:
    if args.dump:
        dump = load_dump(args.dump)
    else:
        dump, _, _ = build_dump(preset(cfg.preset, cfg.seed, cfg.size, cfg.filler))
    counts = [int(w) for w in args.worker_counts.split(",")] if args.worker_counts else [cfg.workers]
    scan_cfg = cfg.scan_config()
    if not cfg.analyses:
        scan_cfg = replace(scan_cfg, analyses=frozenset({"stats"}))
    text = bench_csv(bench(dump, counts, scan_cfg, args.repeats))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args, cfg: CliConfig) -> int:
    from .service import serve

    return serve(cfg.bind or None, cfg.max_concurrent, cfg.workers, cfg.log or None, cfg.report_dir or None,
                 ready=lambda host, port: print(f"listening on {host}:{port}", flush=True))


COMMANDS = {
    "scan": cmd_scan,
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "crossview": cmd_crossview,
    "visualize": cmd_visualize,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, DumpError, RuntimeError, KeyError) as exc:
        print(f"memsieve {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
