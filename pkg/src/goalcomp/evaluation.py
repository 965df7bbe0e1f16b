"""Accuracy and confusion metrics, compression-ratio sweeps, latent
interpolation, reconstruction dumps and the FLOP/accuracy trade-off table."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SampleSet
from .errors import GoalCompError, InvalidArgumentError
from .models import MlpModel, SensorBundle, code_length, encode_batch, fused_forward
from .numerics import mse_loss

log = logging.getLogger(__name__)

THREADS_ENV = "GOALCOMP_THREADS"
SWEEP_HEADER = ("cr", "n", "fused_acc", "baseline_acc", "ratio", "flops")


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    recall: np.ndarray
    count: int

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray, C: int) -> "Metrics":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise InvalidArgumentError("label and prediction counts differ")
        confusion = np.zeros((C, C), dtype=np.int64)
        np.add.at(confusion, (y_true, y_pred), 1)
        support = confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            recall = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
        count = int(y_true.shape[0])
        accuracy = float(np.trace(confusion) / count) if count else 0.0
        return cls(accuracy, confusion, recall, count)


@dataclass
class SweepRow:
    cr: float
    n: int
    fused_acc: float
    baseline_acc: float
    flops: int
    error: str | None = None

    @property
    def ratio(self) -> float:
        return self.fused_acc / self.baseline_acc if self.baseline_acc else float("nan")

    @property
    def failed(self) -> bool:
        return self.error is not None


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _chunked(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, threads: int) -> np.ndarray:
    # fixed chunk boundaries and in-order concatenation keep results thread-count independent
    if threads <= 1 or x.shape[0] < 2 * threads:
        return fn(x)
    bounds = np.linspace(0, x.shape[0], threads + 1).astype(int)
    chunks = [x[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, chunks)), axis=0)


def predict_fused(bundle: SensorBundle, observations: np.ndarray, threads: int | None = None) -> np.ndarray:
    threads = _thread_count() if threads is None else threads
    return _chunked(lambda chunk: fused_forward(bundle, chunk), observations, threads)


def evaluate(bundle: SensorBundle, test: SampleSet, threads: int | None = None) -> Metrics:
    """Encode every sample at each sensor, fuse, and tally argmax predictions."""
    if (test.S, test.d) != (bundle.S, bundle.d) or test.C != bundle.C:
        raise InvalidArgumentError(
            f"test set is S={test.S}, d={test.d}, C={test.C}; bundle expects S={bundle.S}, d={bundle.d}, C={bundle.C}"
        )
    probs = predict_fused(bundle, test.observations, threads)
    return Metrics.from_predictions(test.labels, probs.argmax(axis=1), bundle.C)


def evaluate_baseline(baseline: MlpModel, test: SampleSet, threads: int | None = None) -> Metrics:
    if test.S * test.d != baseline.input_dim:
        raise InvalidArgumentError("test set does not match baseline input dimension")
    threads = _thread_count() if threads is None else threads
    probs = _chunked(baseline, test.flat(), threads)
    return Metrics.from_predictions(test.labels, probs.argmax(axis=1), baseline.output_dim)


def confusion_csv(metrics: Metrics, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(class_names)
    writer.writerows(metrics.confusion.tolist())
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        if r.failed:
            writer.writerow([f"{r.cr:g}", r.n, "FAILED", "", "", ""])
        else:
            writer.writerow([f"{r.cr:g}", r.n, _fmt(r.fused_acc), _fmt(r.baseline_acc), _fmt(r.ratio), r.flops])
    return buf.getvalue()


def tradeoff_report(rows: Sequence[SweepRow], path: str | Path | None = None) -> str:
    """CSV of (cr, flops, accuracy) for the rate/computation trade-off plot."""
    if len(rows) < 2:
        raise InvalidArgumentError("a trade-off report needs at least two sweep rows")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("cr", "flops", "accuracy"))
    for r in rows:
        writer.writerow([f"{r.cr:g}", "" if r.failed else r.flops, "" if r.failed else _fmt(r.fused_acc)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def cr_sweep(config, cr_list: Sequence[float] | None = None, out_dir: str | Path | None = None) -> list[SweepRow]:
    """Train one shared baseline, then phases 1 and 3 for every compression ratio.

    A failing ratio yields a row marked FAILED and the sweep continues.
    Writes ``sweep.csv`` and ``tradeoff.csv`` plus one subdirectory per
    ratio when ``out_dir`` is given.
    """
    from . import training  # training depends on this module

    crs = sorted(config.cr_list if cr_list is None else cr_list)
    cfg = training.replace_crs(config, crs)
    cfg.validate(sweep=True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved-config.json").write_text(cfg.to_json())
    train, test = training.load_data(cfg)
    baseline, base_log = training.phase2_baseline(cfg, train, training.stream(cfg, "phase2"))
    baseline_acc = evaluate_baseline(baseline, test).accuracy
    if out is not None:
        base_log.write_csv(out / "baseline-trainlog.csv", cfg.log_wall_time)
    rows = []
    for cr in crs:
        sub = cfg.with_cr(cr)
        n = code_length(cfg.d, cr)
        cr_dir = out / f"cr_{cr:g}" if out is not None else None
        try:
            result = training.train_compressed(sub, train, test, baseline, base_log, cr_dir)
        except GoalCompError as exc:
            log.warning("sweep row CR=%g failed: %s", cr, exc)
            rows.append(SweepRow(cr, n, float("nan"), baseline_acc, 0, str(exc)))
            continue
        rows.append(result.metrics.row)
    if out is not None:
        (out / "sweep.csv").write_text(sweep_csv(rows))
        ok = [r for r in rows if not r.failed]
        if len(rows) >= 2:
            tradeoff_report(rows, out / "tradeoff.csv")
        elif ok:
            log.info("single-row sweep: no trade-off report")
    return rows


# ---------------------------------------------------------------------------
# latent interpolation


@dataclass
class Interpolation:
    codes: list[np.ndarray]
    frames: list[np.ndarray]
    flip_order: list[int] = field(default_factory=list)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def interpolate_latent(
    decoder: MlpModel, z_start: np.ndarray, z_end: np.ndarray, rng: np.random.Generator
) -> Interpolation:
    """Walk from ``z_start`` to ``z_end`` one bit flip at a time, decoding each code.

    Differing positions are flipped in a seeded random order, giving
    Hamming(z_start, z_end) + 1 frames; the last frame decodes ``z_end``.
    """
    z_start = np.asarray(z_start, dtype=np.uint8).reshape(-1)
    z_end = np.asarray(z_end, dtype=np.uint8).reshape(-1)
    if z_start.shape != z_end.shape:
        raise InvalidArgumentError(f"code lengths differ: {z_start.shape[0]} vs {z_end.shape[0]}")
    if decoder.input_dim != z_start.shape[0]:
        raise InvalidArgumentError(f"decoder expects {decoder.input_dim}-bit codes, got {z_start.shape[0]}")
    order = [int(i) for i in rng.permutation(np.flatnonzero(z_start != z_end))]
    codes = [z_start.copy()]
    for pos in order:
        nxt = codes[-1].copy()
        nxt[pos] = z_end[pos]
        codes.append(nxt)
    # one row at a time so each frame equals decoder(code) bit for bit
    frames = [decoder(c[None, :].astype(np.float64))[0] for c in codes]
    return Interpolation(codes, frames, order)


# ---------------------------------------------------------------------------
# images


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary 8-bit grayscale PGM (P5); pixel = round(255 * clip(x, 0, 1))."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidArgumentError("PGM images must be 2-D")
    pixels = np.floor(255.0 * np.clip(image, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise InvalidArgumentError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise InvalidArgumentError("only 8-bit PGM is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def image_shape_for(d: int, shape: tuple[int, int] | None = None) -> tuple[int, int]:
    if shape is not None:
        if shape[0] * shape[1] != d:
            raise InvalidArgumentError(f"image shape {shape} does not hold {d} values")
        return tuple(shape)
    side = math.isqrt(d)
    if side * side != d:
        raise InvalidArgumentError(f"d={d} is not a perfect square; pass an explicit height x width")
    return side, side


@dataclass
class ReconstructionReport:
    paths: list[Path]
    mse: list[float]
    reconstructions: np.ndarray


def reconstruction_report(
    bundle: SensorBundle,
    samples: np.ndarray,
    out_dir: str | Path,
    sensor: int = 0,
    image_shape: tuple[int, int] | None = None,
) -> ReconstructionReport:
    """Write original/reconstruction PGM pairs for ``samples`` (k, d) and log per-sample MSE."""
    if not bundle.decoders:
        raise InvalidArgumentError("bundle carries no decoders")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[None, :]
    shape = image_shape_for(bundle.d, image_shape)
    codes = encode_batch(bundle.encoders[sensor], samples, bundle.R)
    recon = bundle.decoders[sensor](codes.astype(np.float64))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, errors = [], []
    for i, (x, xr) in enumerate(zip(samples, recon)):
        paths.append(write_pgm(out / f"sample{i:04d}_original.pgm", x.reshape(shape)))
        paths.append(write_pgm(out / f"sample{i:04d}_reconstruction.pgm", xr.reshape(shape)))
        err = mse_loss(x, xr)
        errors.append(err)
        log.info("sample %d reconstruction MSE %.6g", i, err)
    with open(out / "reconstruction.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("sample", "mse"))
        for i, err in enumerate(errors):
            writer.writerow((i, repr(err)))
    return ReconstructionReport(paths, errors, recon)
