"""Command-line front end: gen | run | eval | map.

Exit codes: 0 success, 1 usage error (bad flags, bad config keys,
invalid argument values), 2 runtime or data error (missing/malformed
files, stage failures). The environment variable CABIN_SEED supplies
the default seed when --seed is not given.

Config files are line-oriented ``key = value`` with ``#`` comments.
Command-line overrides win over the file; the file wins over defaults.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import jsonio
from .datacube import (CubeFormatError, NumericError, SplitError,
                       generate_synthetic, load_cube, load_labels, save_cube,
                       save_labels)
from .loop import ProtocolConfig, run_experiment
from .metrics import RenderError, compute_metrics, confusion, default_palette, render_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    """Bad invocation; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE) from None


def _default_seed() -> int:
    raw = os.environ.get("CABIN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"CABIN_SEED must be an integer, got {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cabin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic cube and label map")
    gen.add_argument("--h", type=int, required=True, help="scene height in pixels")
    gen.add_argument("--w", type=int, required=True, help="scene width in pixels")
    gen.add_argument("--b", type=int, required=True, help="spectral band count")
    gen.add_argument("--k", type=int, required=True, help="number of classes")
    gen.add_argument("--sigma", type=float, default=0.05, help="noise scale (default 0.05)")
    gen.add_argument("--seed", type=int, default=None, help="RNG seed (default CABIN_SEED or 0)")
    gen.add_argument("--out", default=".", help="output directory (default .)")

    run = sub.add_parser("run", help="run one experiment or a sweep")
    run.add_argument("--cube", required=True, help="cube text file")
    run.add_argument("--labels", required=True, help="label text file")
    run.add_argument("--out", default="runs", help="output directory (default runs)")
    run.add_argument("--config", default=None, help="key = value config file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="config override; repeatable")
    run.add_argument("--ratio", type=float, default=None, help="annotation ratio override")
    run.add_argument("--copies", type=int, default=None, help="augmentation copies override")
    run.add_argument("--seed", type=int, default=None, help="experiment seed")
    run.add_argument("--baseline", choices=["cabin", "random"], default=None,
                     help="selection mode (default cabin)")
    run.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...",
                     help="run one experiment per value of a config key")
    run.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")

    ev = sub.add_parser("eval", help="score a saved prediction map")
    ev.add_argument("--pred", required=True, help="predictions in label-map format")
    ev.add_argument("--labels", required=True, help="ground-truth label file")
    ev.add_argument("--out", default=None, help="also write the report here")

    mp = sub.add_parser("map", help="render a label or uncertainty grid to PPM")
    mp.add_argument("--input", required=True,
                    help="label-map file, or H W 1 cube file with --uncertainty")
    mp.add_argument("--out", required=True, help="output PPM path")
    mp.add_argument("--uncertainty", action="store_true",
                    help="treat input as a [0,1] grid and render grayscale")
    return parser


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        cube, labels = generate_synthetic(args.h, args.w, args.b, args.k,
                                          args.sigma, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(cube, out / "cube.txt")
    save_labels(labels, out / "labels.txt")
    print(f"wrote {out / 'cube.txt'} and {out / 'labels.txt'}")
    return EXIT_OK


def _assemble_config(args) -> ProtocolConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    if args.ratio is not None:
        mapping["annotation_ratio"] = repr(args.ratio)
    if args.copies is not None:
        mapping["gfp_copies"] = str(args.copies)
    if args.baseline is not None:
        mapping["baseline"] = args.baseline
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    elif "seed" not in mapping:
        mapping["seed"] = str(_default_seed())
    try:
        return ProtocolConfig.from_mapping(mapping)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def parse_config_file(path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def _write_experiment(config: ProtocolConfig, cube_path: str, labels_path: str,
                      out_root: str) -> Path:
    cube = load_cube(cube_path)
    labels = load_labels(labels_path)
    report, artifacts = run_experiment(config, cube, labels)
    run_dir = Path(out_root) / f"{config.config_hash()}-s{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(jsonio.dumps(report) + "\n", encoding="utf-8")
    (run_dir / "classification.ppm").write_text(artifacts["classification_ppm"],
                                                encoding="utf-8")
    (run_dir / "uncertainty.ppm").write_text(artifacts["uncertainty_ppm"],
                                             encoding="utf-8")
    timing = {"wall_clock_seconds": artifacts["wall_clock_seconds"]}
    (run_dir / "timing.json").write_text(jsonio.dumps(timing) + "\n", encoding="utf-8")
    return run_dir


def _sweep_worker(payload):
    config_mapping, cube_path, labels_path, out_root = payload
    config = ProtocolConfig.from_mapping(config_mapping)
    return str(_write_experiment(config, cube_path, labels_path, out_root))


def cmd_run(args) -> int:
    base = _assemble_config(args)
    if args.sweep is None:
        run_dir = _write_experiment(base, args.cube, args.labels, args.out)
        print(f"report: {run_dir / 'report.json'}")
        return EXIT_OK
    if "=" not in args.sweep:
        raise UsageError(f"--sweep expects KEY=V1,V2,..., got {args.sweep!r}")
    key, _, values = args.sweep.partition("=")
    key = key.strip()
    aliases = {"ratio": "annotation_ratio", "copies": "gfp_copies"}
    key = aliases.get(key, key)
    payloads = []
    for tok in values.split(","):
        mapping = {k: str(v) if not isinstance(v, (list, tuple)) else
                   ",".join(str(x) for x in v)
                   for k, v in base.to_payload().items()}
        mapping[key] = tok.strip()
        try:
            ProtocolConfig.from_mapping(mapping)
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from exc
        payloads.append((mapping, args.cube, args.labels, args.out))
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for path in pool.map(_sweep_worker, payloads):
                print(f"report: {Path(path) / 'report.json'}")
    else:
        for payload in payloads:
            path = _sweep_worker(payload)
            print(f"report: {Path(path) / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.labels)
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValueError(
            f"prediction grid {pred.height}x{pred.width} does not match "
            f"labels {truth.height}x{truth.width}")
    mask = truth.flat > 0
    if not mask.any():
        raise ValueError("label file has no labeled pixels")
    cm = confusion(truth.flat[mask], pred.flat[mask],
                   num_classes=max(truth.num_classes, pred.num_classes))
    report = compute_metrics(cm)
    text = jsonio.dumps(report.as_payload())
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_map(args) -> int:
    if args.uncertainty:
        cube = load_cube(args.input)
        if cube.bands != 1:
            raise ValueError("uncertainty grid must have exactly one band")
        text = render_map(cube.values[:, :, 0], None)
    else:
        labels = load_labels(args.input)
        text = render_map(labels.labels, default_palette(labels.num_classes))
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


_HANDLERS = {"gen": cmd_gen, "run": cmd_run, "eval": cmd_eval, "map": cmd_map}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else int(exc.code)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CubeFormatError, SplitError, NumericError, RenderError,
            ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
