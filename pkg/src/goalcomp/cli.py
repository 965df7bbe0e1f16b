"""Command-line entry point: ``goalcomp <subcommand> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or training error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import save_dataset, synth_correlated
from .errors import ConfigError, FormatError, GoalCompError, InvalidArgumentError
from .evaluation import (
    SweepRow,
    confusion_csv,
    cr_sweep,
    evaluate,
    evaluate_baseline,
    image_shape_for,
    interpolate_latent,
    reconstruction_report,
    sweep_csv,
    write_pgm,
)
from .models import Role, flops_estimate, inference_flops, load_bundle

log = logging.getLogger("goalcomp")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _run_options(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, applied after the file is parsed (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (unsigned 64-bit), overrides the config")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan; write nothing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="goalcomp", description="Goal-oriented compression for correlated sensors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the three training phases for config.cr")
    _run_options(p)

    p = sub.add_parser("sweep", help="train one model per ratio in config.cr_list")
    _run_options(p)

    p = sub.add_parser("evaluate", help="score a bundle on the config's test split")
    p.add_argument("bundle")
    _run_options(p)

    p = sub.add_parser("interpolate", help="decode a bit-by-bit walk between two codes")
    p.add_argument("bundle")
    p.add_argument("--sensor", type=int, default=0)
    p.add_argument("--start", help="start code as a 0/1 string (random when omitted)")
    p.add_argument("--end", help="end code as a 0/1 string (random when omitted)")
    p.add_argument("--shape", help="frame shape HxW for PGM output")
    _run_options(p, "interpolation")

    p = sub.add_parser("reconstruct", help="write original/reconstruction PGM pairs")
    p.add_argument("bundle")
    p.add_argument("--sensor", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--shape", help="image shape HxW (default: square)")
    _run_options(p, "reconstruction")

    p = sub.add_parser("synth-data", help="write the configured synthetic set as a DSET file")
    _run_options(p, "synth.dset")

    p = sub.add_parser("inspect-bundle", help="print bundle dimensions and per-model FLOPs")
    p.add_argument("bundle")
    return parser


# ---------------------------------------------------------------------------


def _config(args, sweep: bool = False) -> RunConfig:
    config = load_config(args.config, args.overrides, args.seed)
    return config.validate(sweep=sweep)


def _shape(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise InvalidArgumentError(f"--shape must look like HxW, got {text!r}") from exc
    return h, w


def _bits(text: str, n: int, what: str) -> np.ndarray:
    if len(text) != n or set(text) - {"0", "1"}:
        raise InvalidArgumentError(f"{what} must be a {n}-character 0/1 string, got {text!r}")
    return np.array([int(c) for c in text], dtype=np.uint8)


def _plan(args, config: RunConfig, steps: Sequence[str]) -> int:
    print(config.to_json(), end="")
    for step in steps:
        print(f"plan: {step}")
    return EXIT_OK


def _load_bundle_for(config: RunConfig, path: str):
    bundle = load_bundle(path)
    if (bundle.S, bundle.d, bundle.C) != (config.S, config.d, config.C):
        raise ConfigError(
            "S/d/C", f"bundle has S={bundle.S}, d={bundle.d}, C={bundle.C}; config has S={config.S}, d={config.d}, C={config.C}"
        )
    return bundle


def cmd_train(args) -> int:
    from .training import run_pipeline

    config = _config(args)
    out = Path(args.out or config.output_dir)
    if args.dry_run:
        return _plan(args, config, [f"train CR={config.cr:g} (n={config.n}) -> {out}"])
    result = run_pipeline(config, out)
    row = result.metrics.row
    print(f"CR={row.cr:g} n={row.n} fused_acc={row.fused_acc:.6f} baseline_acc={row.baseline_acc:.6f} "
          f"ratio={row.ratio:.6f} flops={row.flops}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args, sweep=True)
    out = Path(args.out or config.output_dir)
    crs = sorted(config.cr_list)
    if args.dry_run:
        return _plan(args, config, ["train shared baseline"] + [f"train CR={c:g} (n={config.with_cr(c).n})" for c in crs]
                     + [f"write {out / 'sweep.csv'}"])
    rows = cr_sweep(config, crs, out)
    print(sweep_csv(rows), end="")
    return EXIT_RUNTIME if any(r.failed for r in rows) else EXIT_OK


def cmd_evaluate(args) -> int:
    from .training import load_data

    config = _config(args)
    if args.dry_run:
        return _plan(args, config, [f"evaluate {args.bundle} on the test split"])
    bundle = _load_bundle_for(config, args.bundle)
    _, test = load_data(config)
    fused = evaluate(bundle, test)
    base = evaluate_baseline(bundle.baseline, test)
    row = SweepRow(float(bundle.d) / bundle.n, bundle.n, fused.accuracy, base.accuracy, inference_flops(bundle))
    print(f"fused_acc={fused.accuracy:.6f} baseline_acc={base.accuracy:.6f} ratio={row.ratio:.6f} n={bundle.n}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(confusion_csv(fused, test.class_names))
        (out / "metrics.csv").write_text(sweep_csv([row]))
        (out / "resolved-config.json").write_text(config.to_json())
    return EXIT_OK


def cmd_interpolate(args) -> int:
    config = load_config(args.config, args.overrides, args.seed)
    out = Path(args.out)
    if args.dry_run:
        return _plan(args, config, [f"interpolate sensor {args.sensor} of {args.bundle} -> {out}"])
    bundle = load_bundle(args.bundle)
    if not bundle.decoders:
        raise InvalidArgumentError("bundle carries no decoders")
    if not 0 <= args.sensor < bundle.S:
        raise InvalidArgumentError(f"--sensor must be in [0, {bundle.S})")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 8]))
    n = bundle.n
    start = _bits(args.start, n, "--start") if args.start else rng.integers(0, 2, n).astype(np.uint8)
    end = _bits(args.end, n, "--end") if args.end else rng.integers(0, 2, n).astype(np.uint8)
    path = interpolate_latent(bundle.decoders[args.sensor], start, end, rng)
    out.mkdir(parents=True, exist_ok=True)
    try:
        shape = image_shape_for(bundle.d, _shape(args.shape))
    except InvalidArgumentError:
        shape = None
    with open(out / "frames.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "code"] + [f"x{j}" for j in range(bundle.d)])
        for k, (code, frame) in enumerate(zip(path.codes, path.frames)):
            writer.writerow([k, "".join(map(str, code))] + [repr(float(v)) for v in frame])
            if shape is not None:
                write_pgm(out / f"frame{k:03d}.pgm", frame.reshape(shape))
    print(f"{len(path.codes)} frames (Hamming distance {len(path.flip_order)}) -> {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .training import load_data

    config = _config(args)
    out = Path(args.out)
    if args.dry_run:
        return _plan(args, config, [f"reconstruct {args.count} test samples of sensor {args.sensor} -> {out}"])
    if args.count < 1:
        raise InvalidArgumentError("--count must be positive")
    bundle = _load_bundle_for(config, args.bundle)
    if not 0 <= args.sensor < bundle.S:
        raise InvalidArgumentError(f"--sensor must be in [0, {bundle.S})")
    _, test = load_data(config)
    samples = test.sensor(args.sensor)[: args.count]
    report = reconstruction_report(bundle, samples, out, args.sensor, _shape(args.shape) or test.image_shape)
    print(f"{len(report.mse)} samples, mean MSE {float(np.mean(report.mse)):.6f} -> {out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .training import stream

    config = _config(args)
    ds = config.dataset
    if ds.kind != "synth":
        raise ConfigError("dataset.kind", "synth-data needs a synth dataset")
    out = Path(args.out)
    if args.dry_run:
        return _plan(args, config, [f"generate {ds.n_samples} samples (noise {ds.noise:g}) -> {out}"])
    samples = synth_correlated(config.S, config.d, config.C, ds.n_samples, ds.noise, stream(config, "data"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out)
    print(f"wrote {samples.N} samples (S={samples.S}, d={samples.d}, C={samples.C}) -> {out}")
    return EXIT_OK


def cmd_inspect_bundle(args) -> int:
    bundle = load_bundle(args.bundle)
    print(f"S={bundle.S} d={bundle.d} n={bundle.n} C={bundle.C} R={bundle.R}")
    for model in bundle.models():
        widths = "-".join(str(w) for w in model.widths)
        state = " frozen" if model.frozen else ""
        print(f"{Role(model.role).name.lower():9s} {widths:30s} flops={flops_estimate(model)}{state}")
    print(f"inference flops={inference_flops(bundle)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "interpolate": cmd_interpolate,
    "reconstruct": cmd_reconstruct,
    "synth-data": cmd_synth_data,
    "inspect-bundle": cmd_inspect_bundle,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InvalidArgumentError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GoalCompError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
