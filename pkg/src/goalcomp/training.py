"""Three-phase training: per-sensor autoencoders, the frozen raw-input
baseline, and joint encoder + fusion training under the distillation loss."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .config import RunConfig
from .data import SampleSet, SplitSpec, downsample, load_dataset, load_idx, make_pairwise, one_hot, split, synth_correlated
from .errors import ConfigError, ContractError, GoalCompError, TrainingDivergedError
from .evaluation import Metrics, SweepRow, confusion_csv, evaluate, evaluate_baseline, sweep_csv
from .models import (
    MlpModel,
    SensorBundle,
    build_baseline,
    build_decoder,
    build_encoder,
    build_fusion,
    fused_forward,
    inference_flops,
    save_bundle,
)
from .numerics import (
    AdamState,
    CrossEntropyLoss,
    DistillLoss,
    MSELoss,
    adam_step,
    backward_trace,
    cross_entropy,
    distill_loss,
    forward_trace,
    mse_loss,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
FAILURE_MARKER = "FAILED"

_STREAMS = {"data": 1, "split": 2, "phase1": 3, "phase2": 4, "phase3": 5, "pairs_train": 6, "pairs_test": 7}


def stream(config: RunConfig, name: str, cr: float | None = None) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the run seed (and CR)."""
    key = [config.seed, _STREAMS[name]]
    if cr is not None:
        frac = Fraction(str(cr))
        key += [frac.numerator, frac.denominator]
    return np.random.default_rng(np.random.SeedSequence(key))


def replace_crs(config: RunConfig, crs: Sequence[float]) -> RunConfig:
    out = copy.deepcopy(config)
    out.cr_list = list(crs)
    return out


# ---------------------------------------------------------------------------
# logs


@dataclass
class TrainRecord:
    phase: int
    epoch: int
    loss: float
    accuracy: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and (record.phase, record.epoch) <= (self.records[-1].phase, self.records[-1].epoch):
            raise ContractError(
                f"log record (phase {record.phase}, epoch {record.epoch}) is out of order"
            )
        self.records.append(record)

    def phase(self, phase: int) -> list[TrainRecord]:
        return [r for r in self.records if r.phase == phase]

    @classmethod
    def merged(cls, *logs: "TrainLog") -> "TrainLog":
        out = cls()
        for r in sorted((r for lg in logs for r in lg.records), key=lambda r: (r.phase, r.epoch)):
            out.append(r)
        return out

    def to_csv(self, wall_time: bool = False) -> str:
        """CSV text; the seconds column is left empty unless ``wall_time`` (keeps artifacts reproducible)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("phase", "epoch", "loss", "accuracy", "seconds"))
        for r in self.records:
            writer.writerow((
                r.phase,
                r.epoch,
                repr(r.loss),
                "" if r.accuracy is None else repr(r.accuracy),
                f"{r.seconds:.3f}" if wall_time else "",
            ))
        return buf.getvalue()

    def write_csv(self, path: str | Path, wall_time: bool = False) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(wall_time))
        return path


def _check(loss: float, phase: int, epoch: int) -> float:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(phase, epoch, loss)
    return loss


def _batches(N: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(N)
    return [perm[i : i + batch_size] for i in range(0, N, batch_size)]


# ---------------------------------------------------------------------------
# data


def load_data(config: RunConfig) -> tuple[SampleSet, SampleSet]:
    """Build the (train, test) pair described by ``config.dataset``."""
    ds = config.dataset
    if ds.kind == "synth":
        full = synth_correlated(config.S, config.d, config.C, ds.n_samples, ds.noise, stream(config, "data"))
        train, test = split(full, _split_spec(config))
    elif ds.kind == "dset":
        try:
            full = load_dataset(ds.path)
        except OSError as exc:
            raise ConfigError("dataset.path", f"cannot read {ds.path}: {exc}") from exc
        train, test = split(full, _split_spec(config))
    else:
        train, test = _load_idx_pairs(config)
    for part in (train, test):
        if (part.S, part.d, part.C) != (config.S, config.d, config.C):
            raise ConfigError(
                "dataset", f"data has S={part.S}, d={part.d}, C={part.C} but config says S={config.S}, d={config.d}, C={config.C}"
            )
    return train, test


def _split_spec(config: RunConfig) -> SplitSpec:
    seed = int(stream(config, "split").integers(2**63))
    return SplitSpec(config.split.train, config.split.test, seed)


def _load_idx_pairs(config: RunConfig) -> tuple[SampleSet, SampleSet]:
    ds = config.dataset
    try:
        base = load_idx(ds.images, ds.labels)
        base_test = load_idx(ds.test_images, ds.test_labels) if ds.test_images and ds.test_labels else None
    except OSError as exc:
        raise ConfigError("dataset.images", f"cannot read IDX files: {exc}") from exc
    if ds.downsample > 1:
        base = downsample(base, ds.downsample)
        base_test = downsample(base_test, ds.downsample) if base_test is not None else None
    rng = stream(config, "data")
    if base_test is None:
        perm = rng.permutation(base.N)
        if ds.train_pairs + ds.test_pairs > base.N:
            raise ConfigError("dataset.train_pairs", f"need {ds.train_pairs + ds.test_pairs} base images, have {base.N}")
        train_base = base.subset(np.sort(perm[: ds.train_pairs]))
        test_base = base.subset(np.sort(perm[ds.train_pairs : ds.train_pairs + ds.test_pairs]))
    else:
        if ds.train_pairs > base.N or ds.test_pairs > base_test.N:
            raise ConfigError("dataset.train_pairs", "more pairs requested than base images available")
        train_base = base.subset(np.sort(rng.permutation(base.N)[: ds.train_pairs]))
        test_base = base_test.subset(np.sort(rng.permutation(base_test.N)[: ds.test_pairs]))
    return (
        make_pairwise(train_base, stream(config, "pairs_train"), ds.balance),
        make_pairwise(test_base, stream(config, "pairs_test"), ds.balance),
    )


# ---------------------------------------------------------------------------
# phases


def balance_code_bits(encoder: MlpModel, x: np.ndarray) -> None:
    """Shift the quantizer bias so every code bit is 1 for half of ``x``."""
    pre = forward_trace(encoder.layers, x).pre[-1]
    encoder.layers[-1].bias -= np.median(pre, axis=0)


def _autoencoder_loss(enc: MlpModel, dec: MlpModel, x: np.ndarray) -> float:
    return mse_loss(x, dec(enc(x)))


def phase1_autoencoders(
    config: RunConfig, data: SampleSet, rng: np.random.Generator
) -> tuple[list[MlpModel], list[MlpModel], TrainLog]:
    """Train one autoencoder per sensor on reconstruction MSE.

    The sensors are trained in lock step so each epoch yields one log record
    holding the mean full-set MSE across sensors; epoch 0 is the untrained
    model.
    """
    n, hidden = config.n, config.widths.encoder
    encoders = [build_encoder(config.d, n, rng, hidden) for _ in range(data.S)]
    decoders = [build_decoder(n, config.d, rng, hidden) for _ in range(data.S)]
    for i, enc in enumerate(encoders):
        balance_code_bits(enc, data.sensor(i))
    states = [AdamState(lr=config.lr) for _ in range(data.S)]
    params = [{**e.parameters("enc."), **dec.parameters("dec.")} for e, dec in zip(encoders, decoders)]
    trainlog = TrainLog()
    start = time.perf_counter()

    def record(epoch: int) -> None:
        losses = [_autoencoder_loss(e, dec, data.sensor(i)) for i, (e, dec) in enumerate(zip(encoders, decoders))]
        trainlog.append(TrainRecord(1, epoch, _check(float(np.mean(losses)), 1, epoch), None, time.perf_counter() - start))

    record(0)
    for epoch in range(1, config.epochs[0] + 1):
        for i in range(data.S):
            x_all = data.sensor(i)
            enc, dec = encoders[i], decoders[i]
            for idx in _batches(data.N, config.batch_size, rng):
                x = x_all[idx]
                etrace = forward_trace(enc.layers, x)
                dtrace = forward_trace(dec.layers, etrace.output)
                loss = MSELoss(x)
                _check(loss.value(dtrace.output), 1, epoch)
                gdec, gz = backward_trace(dec.layers, dtrace, loss.grad(dtrace.output))
                genc, _ = backward_trace(enc.layers, etrace, gz)
                adam_step(params[i], {**genc.named("enc."), **gdec.named("dec.")}, states[i])
        record(epoch)
    return encoders, decoders, trainlog


def phase2_baseline(config: RunConfig, data: SampleSet, rng: np.random.Generator) -> tuple[MlpModel, TrainLog]:
    """Train the raw-observation classifier with cross-entropy, then freeze it."""
    baseline = build_baseline(data.S, data.d, data.C, rng, config.widths.baseline)
    state = AdamState(lr=config.lr)
    params = baseline.parameters()
    x_all, y_all = data.flat(), one_hot(data.labels, data.C)
    trainlog = TrainLog()
    start = time.perf_counter()

    def record(epoch: int) -> None:
        probs = baseline(x_all)
        loss = _check(cross_entropy(y_all, probs), 2, epoch)
        acc = float(np.mean(probs.argmax(axis=1) == data.labels))
        trainlog.append(TrainRecord(2, epoch, loss, acc, time.perf_counter() - start))

    record(0)
    for epoch in range(1, config.epochs[1] + 1):
        for idx in _batches(data.N, config.batch_size, rng):
            trace = forward_trace(baseline.layers, x_all[idx])
            loss = CrossEntropyLoss(y_all[idx])
            _check(loss.value(trace.output), 2, epoch)
            grads, _ = backward_trace(baseline.layers, trace, loss.grad(trace.output))
            adam_step(params, grads.named(), state)
        record(epoch)
    baseline.freeze()
    return baseline, trainlog


def phase3_joint(
    config: RunConfig,
    data: SampleSet,
    encoders: Sequence[MlpModel],
    baseline: MlpModel,
    rng: np.random.Generator,
    decoders: Sequence[MlpModel] = (),
    soft_targets: np.ndarray | None = None,
) -> tuple[SensorBundle, TrainLog]:
    """Jointly train copies of the phase-1 encoders and a new fusion net.

    The loss is cross-entropy to the labels plus KL from the frozen
    baseline's class probabilities to the fused prediction. ``soft_targets``
    (N, C) replaces the baseline's outputs when given.
    """
    if not baseline.frozen:
        raise ContractError("phase 3 requires a frozen baseline; run phase 2 first")
    if len(encoders) != data.S:
        raise ContractError(f"expected {data.S} phase-1 encoders, got {len(encoders)}")
    n = config.n
    encoders = [e.copy() for e in encoders]
    for i, e in enumerate(encoders):
        balance_code_bits(e, data.sensor(i))
    decoders = list(decoders)
    for dec in decoders:
        dec.freeze()
    fusion = build_fusion(data.S, n, data.C, rng, config.widths.fusion)
    params = fusion.parameters("fusion.")
    for i, e in enumerate(encoders):
        params.update(e.parameters(f"enc{i}."))
    state = AdamState(lr=config.lr)
    y_all = one_hot(data.labels, data.C)
    x_flat = data.flat()
    baseline_digest = baseline.digest() if config.debug else None

    if soft_targets is not None:
        soft_targets = np.asarray(soft_targets, dtype=np.float64)
        if soft_targets.shape != (data.N, data.C):
            raise ContractError(f"soft targets must be ({data.N}, {data.C})")
        targets_for = lambda idx: soft_targets[idx]  # noqa: E731
    elif config.cache_soft_targets:
        cached = baseline(x_flat)
        targets_for = lambda idx: cached[idx]  # noqa: E731
    else:
        targets_for = lambda idx: baseline(x_flat[idx])  # noqa: E731

    bundle = SensorBundle(encoders, decoders, baseline, fusion, data.S, config.d, n, data.C, config.R)
    trainlog = TrainLog()
    start = time.perf_counter()
    all_targets = soft_targets if soft_targets is not None else baseline(x_flat)

    def record(epoch: int) -> None:
        probs = fused_forward(bundle, data.observations)
        loss = _check(distill_loss(y_all, probs, all_targets), 3, epoch)
        acc = float(np.mean(probs.argmax(axis=1) == data.labels))
        trainlog.append(TrainRecord(3, epoch, loss, acc, time.perf_counter() - start))

    record(0)
    for epoch in range(1, config.epochs[2] + 1):
        for idx in _batches(data.N, config.batch_size, rng):
            obs = data.observations[idx]
            traces = [forward_trace(e.layers, obs[:, i, :]) for i, e in enumerate(encoders)]
            z = np.concatenate([t.output for t in traces], axis=1)
            ftrace = forward_trace(fusion.layers, z)
            loss = DistillLoss(y_all[idx], targets_for(idx))
            value = _check(loss.value(ftrace.output), 3, epoch)
            if config.debug:
                ce = cross_entropy(y_all[idx], ftrace.output)
                if not value >= ce:
                    raise ContractError(f"distillation loss {value!r} fell below cross-entropy {ce!r}")
            gfusion, gz = backward_trace(fusion.layers, ftrace, loss.grad(ftrace.output))
            grads = gfusion.named("fusion.")
            for i, (e, t) in enumerate(zip(encoders, traces)):
                genc, _ = backward_trace(e.layers, t, gz[:, i * n : (i + 1) * n])
                grads.update(genc.named(f"enc{i}."))
            adam_step(params, grads, state)
        record(epoch)
    if baseline_digest is not None and baseline.digest() != baseline_digest:
        raise ContractError("baseline parameters changed during phase 3")
    return bundle, trainlog


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunMetrics:
    fused: Metrics
    baseline: Metrics
    row: SweepRow


class RunResult(NamedTuple):
    bundle: SensorBundle
    log: TrainLog
    metrics: RunMetrics


def _write_failure(out: Path | None, exc: BaseException) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILURE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n")


def _finish(
    config: RunConfig, bundle: SensorBundle, trainlog: TrainLog, test: SampleSet, out: Path | None
) -> RunResult:
    fused = evaluate(bundle, test)
    base = evaluate_baseline(bundle.baseline, test)
    row = SweepRow(config.cr, bundle.n, fused.accuracy, base.accuracy, inference_flops(bundle))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_bundle(bundle, out / "bundle.gcmp")
        trainlog.write_csv(out / "trainlog.csv", config.log_wall_time)
        (out / "metrics.csv").write_text(sweep_csv([row]))
        (out / "confusion.csv").write_text(confusion_csv(fused, test.class_names))
        (out / "resolved-config.json").write_text(config.to_json())
        (out / FAILURE_MARKER).unlink(missing_ok=True)
    log.info("CR=%g n=%d fused=%.4f baseline=%.4f", config.cr, bundle.n, fused.accuracy, base.accuracy)
    return RunResult(bundle, trainlog, RunMetrics(fused, base, row))


def train_compressed(
    config: RunConfig,
    train: SampleSet,
    test: SampleSet,
    baseline: MlpModel,
    baseline_log: TrainLog | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Phases 1 and 3 for ``config.cr`` on top of an already frozen baseline."""
    out = Path(out_dir) if out_dir is not None else None
    try:
        encoders, decoders, log1 = phase1_autoencoders(config, train, stream(config, "phase1", config.cr))
        bundle, log3 = phase3_joint(config, train, encoders, baseline, stream(config, "phase3", config.cr), decoders)
        trainlog = TrainLog.merged(log1, *([baseline_log] if baseline_log else []), log3)
        return _finish(config, bundle, trainlog, test, out)
    except GoalCompError as exc:
        _write_failure(out, exc)
        raise


def run_pipeline(config: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Validate, then run phases 1 -> 2 -> 3 and persist bundle, logs and metrics.

    Artifacts go to ``out_dir`` (default ``config.output_dir``). On failure a
    ``FAILED`` file with the error text is left next to any partial output.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.output_dir)
    try:
        train, test = load_data(config)
        encoders, decoders, log1 = phase1_autoencoders(config, train, stream(config, "phase1", config.cr))
        baseline, log2 = phase2_baseline(config, train, stream(config, "phase2"))
        bundle, log3 = phase3_joint(config, train, encoders, baseline, stream(config, "phase3", config.cr), decoders)
        return _finish(config, bundle, TrainLog.merged(log1, log2, log3), test, out)
    except GoalCompError as exc:
        _write_failure(out, exc)
        raise
