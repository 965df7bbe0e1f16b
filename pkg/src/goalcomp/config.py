"""Run configuration: JSON document -> validated RunConfig."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError
from .models import code_length

DATASET_KINDS = ("synth", "idx_pairs", "dset")


@dataclass
class DatasetSpec:
    kind: str = "synth"
    # synth
    n_samples: int = 4000
    noise: float = 0.5
    # idx_pairs
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_pairs: int = 10000
    test_pairs: int = 2000
    downsample: int = 2
    balance: bool = False
    # dset
    path: str | None = None


@dataclass
class SplitConfig:
    train: float = 0.8
    test: float = 0.2


@dataclass
class WidthConfig:
    encoder: list[int] | None = None
    fusion: list[int] | None = None
    baseline: list[int] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    S: int = 2
    d: int = 16
    C: int = 4
    R: int = 16
    cr: float = 2
    cr_list: list[float] = field(default_factory=lambda: [2, 4, 8])
    epochs: list[int] = field(default_factory=lambda: [50, 50, 100])
    batch_size: int = 64
    lr: float = 0.01
    widths: WidthConfig = field(default_factory=WidthConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    cache_soft_targets: bool = False
    debug: bool = False
    log_wall_time: bool = False
    output_dir: str = "runs/default"

    @property
    def n(self) -> int:
        return code_length(self.d, self.cr)

    def with_cr(self, cr: float) -> "RunConfig":
        out = copy.deepcopy(self)
        out.cr = cr
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self, sweep: bool = False) -> "RunConfig":
        for key in ("S", "d", "C", "R", "batch_size"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(key, f"must be a positive integer, got {value!r}")
        if self.S < 1:
            raise ConfigError("S", "need at least one sensor")
        if self.C < 2:
            raise ConfigError("C", "need at least two classes")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed!r}")
        if len(self.epochs) != 3 or any(not isinstance(e, int) or e < 1 for e in self.epochs):
            raise ConfigError("epochs", f"must be three positive integers (phases 1-3), got {self.epochs!r}")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        crs = list(self.cr_list) if sweep else [self.cr]
        key = "cr_list" if sweep else "cr"
        if not crs:
            raise ConfigError(key, "empty compression-ratio list")
        for cr in crs:
            if not isinstance(cr, (int, float)) or isinstance(cr, bool) or cr < 1:
                raise ConfigError(key, f"compression ratio must be a number >= 1, got {cr!r}")
            n = code_length(self.d, cr)
            if n > self.R:
                raise ConfigError(
                    key, f"CR={cr:g} gives n=ceil(d/CR)={n} bits, exceeding the bit budget R={self.R} (n <= R required)"
                )
        for name in ("encoder", "fusion", "baseline"):
            w = getattr(self.widths, name)
            if w is not None and (not w or any(not isinstance(x, int) or x < 1 for x in w)):
                raise ConfigError(f"widths.{name}", f"must be a non-empty list of positive integers, got {w!r}")
        ds = self.dataset
        if ds.kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}, got {ds.kind!r}")
        if ds.kind == "synth":
            if self.S < 2:
                raise ConfigError("S", "the synthetic generator needs at least two sensors")
            if ds.n_samples < 1:
                raise ConfigError("dataset.n_samples", "must be positive")
            if ds.noise < 0:
                raise ConfigError("dataset.noise", "must be non-negative")
        elif ds.kind == "idx_pairs":
            for k in ("images", "labels"):
                if not getattr(ds, k):
                    raise ConfigError(f"dataset.{k}", "path required for idx_pairs datasets")
            if self.S != 2:
                raise ConfigError("S", "pairwise datasets have exactly two sensors")
            if self.C != 11:
                raise ConfigError("C", "pairwise datasets have 11 classes")
        elif not ds.path:
            raise ConfigError("dataset.path", "path required for dset datasets")
        if ds.kind != "idx_pairs":
            sp = self.split
            if sp.train <= 0 or sp.test <= 0 or sp.train + sp.test > 1.0 + 1e-12:
                raise ConfigError("split", f"fractions must be positive with sum <= 1, got {sp.train}/{sp.test}")
        return self


def _from_dict(cls, data: dict[str, Any], prefix: str = ""):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(prefix + key, "unknown key")
        sub = {"widths": WidthConfig, "dataset": DatasetSpec, "split": SplitConfig}.get(key) if cls is RunConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(prefix + key, "must be an object")
            value = _from_dict(sub, value, f"{prefix}{key}.")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    return _from_dict(RunConfig, data)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply dotted ``KEY=VALUE`` overrides; values are parsed as JSON when possible."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"'{part}' is not an object")
            node = child
        node[parts[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: Sequence[str] = (), seed: int | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("--config", "top level must be an object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
