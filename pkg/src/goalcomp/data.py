"""Datasets: IDX ingestion, two-sensor pairing, a synthetic correlated
generator, one-hot encoding, splits and the DSET cache format."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError, UnsupportedVersionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DSET_MAGIC = b"DSET"
DSET_VERSION = 1

MISMATCH_LABEL = "F"


@dataclass
class SampleSet:
    """N synchronized multi-sensor observations with integer labels.

    ``observations`` has shape (N, S, d); ``index`` records each sample's
    position in the set it was derived from.
    """

    observations: np.ndarray
    labels: np.ndarray
    C: int
    provenance: str = ""
    image_shape: tuple[int, int] | None = None
    class_names: list[str] | None = None
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.observations.ndim != 3:
            raise InvalidArgumentError(f"observations must be (N, S, d), got {self.observations.shape}")
        if self.observations.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError("observation and label counts differ")
        if self.labels.shape[0] < 1:
            raise InvalidArgumentError("a sample set needs at least one sample")
        if self.C < 1 or self.labels.min() < 0 or self.labels.max() >= self.C:
            raise InvalidArgumentError(f"labels must lie in [0, {self.C})")
        if self.index is None:
            self.index = np.arange(self.N)
        if self.class_names is None:
            self.class_names = [str(c) for c in range(self.C)]

    @property
    def N(self) -> int:
        return self.observations.shape[0]

    @property
    def S(self) -> int:
        return self.observations.shape[1]

    @property
    def d(self) -> int:
        return self.observations.shape[2]

    def sensor(self, i: int) -> np.ndarray:
        return self.observations[:, i, :]

    def flat(self) -> np.ndarray:
        """Concatenated raw observations, shape (N, S*d)."""
        return self.observations.reshape(self.N, -1)

    def subset(self, idx: np.ndarray, provenance: str | None = None) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(
            self.observations[idx],
            self.labels[idx],
            self.C,
            provenance if provenance is not None else self.provenance,
            self.image_shape,
            list(self.class_names),
            self.index[idx],
        )


@dataclass
class SplitSpec:
    train: float = 0.8
    test: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.train <= 0 or self.test <= 0 or self.train + self.test > 1.0 + 1e-12:
            raise InvalidArgumentError(f"split fractions must be positive with sum <= 1, got {self.train}/{self.test}")


def one_hot(label, C: int) -> np.ndarray:
    """Unit basis vector(s); accepts a scalar label or an array of labels."""
    labels = np.asarray(label, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidArgumentError(f"label out of range [0, {C})")
    return np.eye(C, dtype=np.float64)[labels]


def split(samples: SampleSet, spec: SplitSpec) -> tuple[SampleSet, SampleSet]:
    n_train = math.floor(samples.N * spec.train + 1e-9)
    n_test = math.floor(samples.N * spec.test + 1e-9)
    if n_train < 1 or n_test < 1:
        raise InvalidArgumentError(
            f"split {spec.train}/{spec.test} of {samples.N} samples leaves an empty partition"
        )
    perm = np.random.default_rng(spec.seed).permutation(samples.N)
    return (
        samples.subset(perm[:n_train], f"{samples.provenance}|train"),
        samples.subset(perm[n_train : n_train + n_test], f"{samples.provenance}|test"),
    )


# ---------------------------------------------------------------------------
# IDX


def _read_idx(data: bytes, magic: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise FormatError(f"{what}: truncated header at offset 0")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{what}: truncated dimension header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = math.prod(dims)
    if len(data) - header < count:
        raise FormatError(
            f"{what}: truncated payload at offset {header}: expected {count} bytes, found {len(data) - header}"
        )
    if len(data) - header > count:
        raise FormatError(f"{what}: {len(data) - header - count} trailing bytes at offset {header + count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def parse_idx(images: bytes, labels: bytes) -> SampleSet:
    imgs = _read_idx(images, IDX_IMAGES_MAGIC, "images")
    labs = _read_idx(labels, IDX_LABELS_MAGIC, "labels")
    if imgs.shape[0] != labs.shape[0]:
        raise FormatError(f"image count {imgs.shape[0]} (offset 4) != label count {labs.shape[0]} (offset 4)")
    if labs.size and labs.max() > 9:
        raise FormatError(f"label {int(labs.max())} out of range 0-9 at offset {8 + int(np.argmax(labs > 9))}")
    n, rows, cols = imgs.shape
    obs = imgs.reshape(n, 1, rows * cols).astype(np.float64) / 255.0
    return SampleSet(obs, labs.astype(np.int64), 10, "idx", (rows, cols))


def load_idx(images_path: str | Path, labels_path: str | Path) -> SampleSet:
    out = parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes())
    out.provenance = f"idx:{Path(images_path).name}"
    return out


def downsample(samples: SampleSet, factor: int = 2) -> SampleSet:
    """Average-pool image-shaped observations by ``factor`` (28x28 -> 14x14 for 2)."""
    if samples.image_shape is None:
        raise InvalidArgumentError("downsampling needs image-shaped observations")
    h, w = samples.image_shape
    if h % factor or w % factor:
        raise InvalidArgumentError(f"image shape {h}x{w} is not divisible by {factor}")
    imgs = samples.observations.reshape(samples.N, samples.S, h // factor, factor, w // factor, factor)
    pooled = imgs.mean(axis=(3, 5)).reshape(samples.N, samples.S, -1)
    return SampleSet(
        pooled, samples.labels, samples.C, f"{samples.provenance}|pool{factor}",
        (h // factor, w // factor), list(samples.class_names), samples.index,
    )


# ---------------------------------------------------------------------------
# generators


def make_pairwise(base: SampleSet, rng: np.random.Generator, balance: bool = False) -> SampleSet:
    """Two-sensor set from two independently shuffled copies of ``base``.

    A pair gets its members' shared class, or the extra class ``base.C``
    when the classes differ. With ``balance`` the second half of the pairs
    is re-drawn from the first member's class so the mismatch class holds at
    most half the mass.
    """
    if base.N < 1:
        raise InvalidArgumentError("empty base set")
    if base.S != 1:
        raise InvalidArgumentError("pairing expects a single-sensor base set")
    first = rng.permutation(base.N)
    second = rng.permutation(base.N)
    if balance:
        forced = np.arange(base.N // 2, base.N)
        by_class = {c: np.flatnonzero(base.labels == c) for c in range(base.C)}
        for pos in forced:
            pool = by_class[int(base.labels[first[pos]])]
            second[pos] = pool[rng.integers(pool.shape[0])]
    a, b = base.labels[first], base.labels[second]
    labels = np.where(a == b, a, base.C)
    obs = np.stack([base.observations[first, 0, :], base.observations[second, 0, :]], axis=1)
    names = list(base.class_names) + [MISMATCH_LABEL]
    return SampleSet(obs, labels, base.C + 1, f"{base.provenance}|pairs", base.image_shape, names)


def synth_correlated(
    S: int,
    d: int,
    C: int,
    N: int,
    noise: float,
    rng: np.random.Generator,
    view_spread: float = 0.3,
) -> SampleSet:
    """Correlated multi-sensor observations driven by a shared latent.

    Each class owns a latent prototype. A sample's latent is its class
    prototype plus ``noise``-scaled jitter shared by all sensors; sensor
    ``s`` sees ``sigmoid(A_s @ latent + noise * eps_s)``, where the views
    ``A_s`` are a common mixing matrix plus a per-sensor perturbation of
    relative size ``view_spread``.
    """
    if S < 2 or C < 2 or d < 1 or N < 1:
        raise InvalidArgumentError(f"need S >= 2, C >= 2, d >= 1, N >= 1; got S={S}, C={C}, d={d}, N={N}")
    if noise < 0:
        raise InvalidArgumentError("noise must be non-negative")
    k = d
    prototypes = rng.standard_normal((C, k))
    shared = rng.standard_normal((d, k)) / math.sqrt(k)
    views = [shared + view_spread * rng.standard_normal((d, k)) / math.sqrt(k) for _ in range(S)]
    labels = rng.integers(0, C, size=N)
    latent = prototypes[labels] + noise * rng.standard_normal((N, k))
    obs = np.empty((N, S, d))
    for s, view in enumerate(views):
        pre = latent @ view.T + noise * rng.standard_normal((N, d))
        obs[:, s, :] = 1.0 / (1.0 + np.exp(-pre))
    return SampleSet(obs, labels, C, f"synth:S={S},d={d},C={C},N={N},noise={noise:g}")


def gaussian_blobs(C: int, d: int, N: int, spread: float, rng: np.random.Generator) -> SampleSet:
    """Single-sensor blob set in [0, 1]^d used for the pairing toy problem."""
    centers = rng.uniform(0.2, 0.8, size=(C, d))
    labels = rng.integers(0, C, size=N)
    obs = np.clip(centers[labels] + spread * rng.standard_normal((N, d)), 0.0, 1.0)
    return SampleSet(obs[:, None, :], labels, C, f"blobs:C={C},d={d},N={N}")


# ---------------------------------------------------------------------------
# DSET cache
#
# magic "DSET" | u16 version | u32 N, S, d, C | u32 provenance length | utf-8 provenance
# | u32 image rows, cols (0, 0 if none) | u32 class-name block length | utf-8 names joined by "\n"
# | f64 observations[N*S*d] | u32 labels[N] | u32 index[N]; little-endian


def dataset_to_bytes(samples: SampleSet) -> bytes:
    buf = io.BytesIO()
    buf.write(DSET_MAGIC)
    buf.write(struct.pack("<H", DSET_VERSION))
    buf.write(struct.pack("<4I", samples.N, samples.S, samples.d, samples.C))
    prov = samples.provenance.encode()
    buf.write(struct.pack("<I", len(prov)) + prov)
    buf.write(struct.pack("<2I", *(samples.image_shape or (0, 0))))
    names = "\n".join(samples.class_names).encode()
    buf.write(struct.pack("<I", len(names)) + names)
    buf.write(np.ascontiguousarray(samples.observations, dtype="<f8").tobytes())
    buf.write(samples.labels.astype("<u4").tobytes())
    buf.write(samples.index.astype("<u4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> SampleSet:
    if data[:4] != DSET_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0, expected {DSET_MAGIC!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"truncated dataset at offset {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    def raw(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(data):
            raise FormatError(f"truncated dataset at offset {pos}")
        out = data[pos : pos + size]
        pos += size
        return out

    (version,) = take("<H")
    if version != DSET_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    N, S, d, C = take("<4I")
    provenance = raw(take("<I")[0]).decode()
    rows, cols = take("<2I")
    names = raw(take("<I")[0]).decode().split("\n")
    obs = np.frombuffer(raw(8 * N * S * d), dtype="<f8").astype(np.float64).reshape(N, S, d)
    labels = np.frombuffer(raw(4 * N), dtype="<u4").astype(np.int64)
    index = np.frombuffer(raw(4 * N), dtype="<u4").astype(np.int64)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes at offset {pos}")
    return SampleSet(obs, labels, C, provenance, (rows, cols) if rows else None, names, index)


def save_dataset(samples: SampleSet, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_to_bytes(samples))
    return path


def load_dataset(path: str | Path) -> SampleSet:
    return dataset_from_bytes(Path(path).read_bytes())
