"""Command-line entry point: ``ucan {rank,erf,macs,bench,forward,init}``.

Every command writes its report (CSV plus a JSON mirror, and SVG figures unless
``--no-plot``) and a ``<command>_manifest.json`` recording the resolved config,
seed, library version and SHA-256 of each output. Exit codes: 0 success,
2 usage, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, instrument
from .analysis import ENGINES, bench_attention, measure_erf, rank_sweep
from .attention import TileConfig
from .config import ModelConfig, parse_config
from .errors import ConfigError, NumericError, UcanError, WeightFileError
from .large_kernel import LkdConfig
from .network import init_weights, load_model, save_model, ucan_forward
from .tensorio import read_ppm, write_ppm

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MAP_CHOICES = ("relu", "elu1", "symrelu", "hedgehog")


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def int_list(text):
    return [positive_int(t) for t in text.split(",") if t.strip()]


def engine_list(text):
    engines = [t.strip() for t in text.split(",") if t.strip()]
    bad = [e for e in engines if e not in ENGINES]
    if bad or not engines:
        raise argparse.ArgumentTypeError(f"engines must be drawn from {','.join(ENGINES)}")
    return engines


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, config, seed, outputs):
    manifest = {
        "command": command,
        "config": {k: config[k] for k in sorted(config)},
        "seed": seed,
        "version": __version__,
        "outputs": [{"path": Path(p).name, "sha256": _sha256(p)} for p in outputs],
    }
    path = Path(out_dir) / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_table(out_dir, stem, rows):
    """Write ``rows`` (list of dicts) as ``stem.csv`` and ``stem.json``."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    fields = list(rows[0]) if rows else []
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=1) + "\n")
    return [csv_path, json_path]


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_rank(args):
    out = _out_dir(args.out)
    reports = rank_sweep(args.map, args.n, args.d, range(args.seeds), args.tol, args.m)
    rows = [{
        "seed": r.seed, "kind": r.kind, "N": r.N, "d": r.d, "m": r.m, "tol": r.tol,
        "rank": r.rank, "bound": r.bound,
        "singular_values": " ".join(f"{v:.17g}" for v in r.singular_values),
    } for r in reports]
    outputs = write_table(out, "rank_report", rows)
    if args.plot:
        from .plotting import rank_spectrum
        outputs.append(rank_spectrum(reports, out / "rank_spectrum.svg", args.tol))
    config = {"n": args.n, "d": args.d, "map": args.map, "m": args.m, "seeds": args.seeds, "tol": args.tol}
    write_manifest(out, "rank", config, 0, outputs)
    mean = float(np.mean([r.rank for r in reports]))
    print(f"rank {args.map}: mean numerical rank {mean:.2f} over {len(reports)} seeds (bound {reports[0].bound})")
    return EXIT_OK


def cmd_erf(args):
    out = _out_dir(args.out)
    cfg = LkdConfig(args.k_core, args.dilation, args.k_extra, channels=16)
    rep = measure_erf(cfg)
    rows = [{
        "k_core": cfg.k_core, "dilation": cfg.dilation, "k_extra": "" if cfg.k_extra is None else cfg.k_extra,
        "predicted_erf": rep.predicted_erf, "measured_erf_h": rep.measured_erf_h,
        "measured_erf_w": rep.measured_erf_w, "match": rep.matches,
    }]
    outputs = write_table(out, "erf_report", rows)
    if args.plot:
        from .plotting import erf_profile
        outputs.append(erf_profile(rep, out / "erf_profile.svg"))
    config = {"k_core": args.k_core, "dilation": args.dilation, "k_extra": args.k_extra}
    write_manifest(out, "erf", config, 0, outputs)
    print(f"erf: predicted {rep.predicted_erf}, measured {rep.measured_erf_h}x{rep.measured_erf_w}")
    return EXIT_OK


def _read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise WeightFileError(f"cannot read config {path}: {exc}", field="config") from exc
    return parse_config(text)


def cmd_macs(args):
    out = _out_dir(args.out)
    cfg = _read_config(args.config)
    params = init_weights(cfg)
    img = np.full((1, 3, args.height, args.width), 0.5, np.float32)
    with instrument.counting() as report:
        ucan_forward(img, params, cfg)
        rep = report()
    components = {}
    for path, counts in rep.by_scope.items():
        key = "/".join(path.split("/")[:3]) or "(unscoped)"
        if key == "ucan":
            key = "ucan (shallow, fuse, recon)"
        components[key] = components.get(key, 0) + counts["matmul"] + counts["conv"]
    rows = [{"component": k, "macs": v} for k, v in sorted(components.items())]
    rows.append({"component": "total", "macs": rep.macs})
    rows.append({"component": "elementwise_ops", "macs": rep.elementwise})
    outputs = write_table(out, "macs_report", rows)
    if args.plot:
        from .plotting import mac_breakdown
        outputs.append(mac_breakdown(rows[:-2], out / "macs_breakdown.svg"))
    config = {**cfg.to_dict(), "height": args.height, "width": args.width}
    write_manifest(out, "macs", config, cfg.seed, outputs)
    print(f"macs: {rep.macs} MACs at {args.height}x{args.width} (x{cfg.scale})")
    return EXIT_OK


def cmd_bench(args):
    out = _out_dir(args.out)
    rows = bench_attention(args.n_list, args.d, args.engines, TileConfig(args.tile, args.tile))
    outputs = write_table(out, "bench_report", rows)
    if args.plot:
        from .plotting import bench_scaling
        outputs.append(bench_scaling(rows, out / "bench_scaling.svg"))
    config = {"n_list": ",".join(map(str, args.n_list)), "engines": ",".join(args.engines), "d": args.d, "tile": args.tile}
    write_manifest(out, "bench", config, 0, outputs)
    worst = max(r["max_rel_dev"] for r in rows)
    print(f"bench: {len(rows)} measurements, worst deviation from oracle {worst:.2e}")
    return EXIT_OK


def cmd_forward(args):
    params, cfg = load_model(args.weights)
    if args.scale is not None and args.scale != cfg.scale:
        raise ConfigError(f"weights were built for scale {cfg.scale}, --scale is {args.scale}")
    img = read_ppm(args.input)
    y = ucan_forward(img, params, cfg)
    if not np.all(np.isfinite(y)):
        raise NumericError("forward pass produced non-finite values")
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(output, y)
    out = _out_dir(args.out or output.parent)
    config = {**cfg.to_dict(), "weights": Path(args.weights).name, "input": Path(args.input).name}
    write_manifest(out, "forward", config, cfg.seed, [output])
    print(f"forward: {img.shape[3]}x{img.shape[2]} -> {y.shape[3]}x{y.shape[2]} written to {output}")
    return EXIT_OK


def cmd_init(args):
    cfg = _read_config(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    target = Path(args.weights_out)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_model(target, init_weights(cfg), cfg)
    out = _out_dir(args.out or target.parent)
    write_manifest(out, "init", cfg.to_dict(), cfg.seed, [target])
    print(f"init: wrote seeded weights (seed {cfg.seed}) to {target}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="ucan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_plot(p):
        p.add_argument("--no-plot", dest="plot", action="store_false", help="skip SVG figures")

    p = sub.add_parser("rank", help="numerical rank of kernelised attention matrices")
    p.add_argument("--n", type=positive_int, default=256)
    p.add_argument("--d", type=positive_int, default=48)
    p.add_argument("--map", choices=MAP_CHOICES, default="hedgehog")
    p.add_argument("--m", type=positive_int, default=1, help="Hedgehog pair count")
    p.add_argument("--seeds", type=positive_int, default=10)
    p.add_argument("--tol", type=positive_float, default=1e-6)
    p.add_argument("--out", required=True)
    add_plot(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("erf", help="impulse-response ERF of the large-kernel branch")
    p.add_argument("--k-core", type=positive_int, default=5)
    p.add_argument("--dilation", type=positive_int, default=2)
    p.add_argument("--k-extra", type=positive_int, default=None)
    p.add_argument("--out", required=True)
    add_plot(p)
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("macs", help="instrumented MAC count of a full forward pass")
    p.add_argument("--config", required=True)
    p.add_argument("--height", type=positive_int, default=64)
    p.add_argument("--width", type=positive_int, default=64)
    p.add_argument("--out", required=True)
    add_plot(p)
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("bench", help="attention engine scaling benchmark")
    p.add_argument("--n-list", type=int_list, default=[256, 512, 1024])
    p.add_argument("--engines", type=engine_list, default=list(ENGINES))
    p.add_argument("--d", type=positive_int, default=32)
    p.add_argument("--tile", type=positive_int, default=64)
    p.add_argument("--out", required=True)
    add_plot(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forward", help="super-resolve a PPM image")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=None)
    p.add_argument("--output", required=True)
    p.add_argument("--out", default=None, help="manifest directory (default: next to --output)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("init", help="write seeded random weights")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--out", default=None, help="manifest directory (default: next to --weights-out)")
    p.set_defaults(func=cmd_init)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WeightFileError as exc:
        field = f" [field: {exc.field}]" if exc.field else ""
        print(f"ucan {args.command}: I/O error: {exc}{field}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"ucan {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UcanError) as exc:
        print(f"ucan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ucan {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
