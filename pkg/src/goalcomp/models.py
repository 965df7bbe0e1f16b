"""Network roles (encoder, decoder, baseline, fusion), the distributed
predictor, FLOP accounting and the bundle file format."""

from __future__ import annotations

import enum
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetExceededError, FormatError, InvalidArgumentError, UnsupportedVersionError
from .numerics import FINAL_ONLY, Activation, DenseLayer, forward_trace, he_init

BUNDLE_MAGIC = b"GCMP"
BUNDLE_VERSION = 1

ENCODER_HIDDEN = 3
FUSION_HIDDEN = 5


class Role(enum.IntEnum):
    ENCODER = 0
    DECODER = 1
    BASELINE = 2
    FUSION = 3


_FINAL_ACTIVATION = {
    Role.ENCODER: Activation.QSIGMOID,
    Role.DECODER: Activation.SIGMOID,
    Role.BASELINE: Activation.SOFTMAX,
    Role.FUSION: Activation.SOFTMAX,
}


@dataclass
class MlpModel:
    layers: list[DenseLayer]
    role: Role
    frozen: bool = False

    def __post_init__(self) -> None:
        for i, layer in enumerate(self.layers):
            if layer.activation in FINAL_ONLY and i != len(self.layers) - 1:
                raise InvalidArgumentError(f"{layer.activation.name} is only allowed on the final layer")
            if i and layer.fan_in != self.layers[i - 1].fan_out:
                raise InvalidArgumentError(
                    f"layer {i} expects {layer.fan_in} inputs but layer {i - 1} emits {self.layers[i - 1].fan_out}"
                )
        if self.layers and self.layers[-1].activation is not _FINAL_ACTIVATION[self.role]:
            raise InvalidArgumentError(
                f"{self.role.name} model must end in {_FINAL_ACTIVATION[self.role].name}"
            )
        if self.frozen:
            self.freeze()

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.fan_out for layer in self.layers]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = forward_trace(self.layers, x).output
        return out[0] if x.ndim == 1 else out

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weights"] = layer.weights
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    def freeze(self) -> None:
        """Mark the model frozen and make its arrays read-only."""
        self.frozen = True
        for layer in self.layers:
            layer.weights.flags.writeable = False
            layer.bias.flags.writeable = False

    def copy(self) -> "MlpModel":
        layers = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return MlpModel(layers, self.role, frozen=False)

    def param_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for l in self.layers for a in (l.weights, l.bias)
        )

    def digest(self) -> str:
        return hashlib.sha256(self.param_bytes()).hexdigest()


@dataclass
class LatentCode:
    bits: np.ndarray
    sensor_index: int = 0

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if np.any(self.bits > 1):
            raise InvalidArgumentError("latent code entries must be 0 or 1")

    def __len__(self) -> int:
        return self.bits.shape[0]


@dataclass
class SensorBundle:
    encoders: list[MlpModel]
    decoders: list[MlpModel]
    baseline: MlpModel
    fusion: MlpModel
    S: int
    d: int
    n: int
    C: int
    R: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.S < 1:
            raise InvalidArgumentError("S must be >= 1")
        if self.n > self.R:
            raise BudgetExceededError(f"code length n={self.n} exceeds bit budget R={self.R}")
        if len(self.encoders) != self.S:
            raise InvalidArgumentError(f"expected {self.S} encoders, got {len(self.encoders)}")
        if self.decoders and len(self.decoders) != self.S:
            raise InvalidArgumentError(f"expected {self.S} decoders, got {len(self.decoders)}")
        for e in self.encoders:
            if (e.input_dim, e.output_dim) != (self.d, self.n):
                raise InvalidArgumentError(f"encoder maps {e.input_dim}->{e.output_dim}, expected {self.d}->{self.n}")
        for dec in self.decoders:
            if (dec.input_dim, dec.output_dim) != (self.n, self.d):
                raise InvalidArgumentError(f"decoder maps {dec.input_dim}->{dec.output_dim}, expected {self.n}->{self.d}")
        if (self.fusion.input_dim, self.fusion.output_dim) != (self.S * self.n, self.C):
            raise InvalidArgumentError("fusion dims do not match S*n -> C")
        if (self.baseline.input_dim, self.baseline.output_dim) != (self.S * self.d, self.C):
            raise InvalidArgumentError("baseline dims do not match S*d -> C")

    def models(self) -> list[MlpModel]:
        return [*self.encoders, *self.decoders, self.baseline, self.fusion]


# ---------------------------------------------------------------------------
# construction


def geometric_widths(start: int, end: int, hidden: int) -> list[int]:
    """Hidden widths ``round(start * (end/start) ** (k/(hidden+1)))`` for k = 1..hidden."""
    ratio = end / start
    return [int(math.floor(start * ratio ** (k / (hidden + 1)) + 0.5)) for k in range(1, hidden + 1)]


def _build(widths: Sequence[int], final: Activation, role: Role, rng: np.random.Generator) -> MlpModel:
    layers = []
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        act = final if i == last else Activation.RELU
        layers.append(DenseLayer(he_init(fan_in, fan_out, rng), np.zeros(fan_out), act))
    return MlpModel(layers, role)


def _check_hidden(hidden: Sequence[int] | None, default: list[int], what: str) -> list[int]:
    if hidden is None:
        return default
    hidden = [int(h) for h in hidden]
    if any(h < 1 for h in hidden):
        raise InvalidArgumentError(f"{what} hidden widths must be positive")
    return hidden


def build_encoder(d: int, n: int, rng: np.random.Generator, hidden: Sequence[int] | None = None) -> MlpModel:
    if not 1 <= n <= d:
        raise InvalidArgumentError(f"encoder needs 1 <= n <= d, got n={n}, d={d}")
    widths = [d, *_check_hidden(hidden, geometric_widths(d, n, ENCODER_HIDDEN), "encoder"), n]
    return _build(widths, Activation.QSIGMOID, Role.ENCODER, rng)


def build_decoder(n: int, d: int, rng: np.random.Generator, hidden: Sequence[int] | None = None) -> MlpModel:
    if not 1 <= n <= d:
        raise InvalidArgumentError(f"decoder needs 1 <= n <= d, got n={n}, d={d}")
    enc_hidden = _check_hidden(hidden, geometric_widths(d, n, ENCODER_HIDDEN), "encoder")
    widths = [n, *reversed(enc_hidden), d]
    return _build(widths, Activation.SIGMOID, Role.DECODER, rng)


def build_fusion(S: int, n: int, C: int, rng: np.random.Generator, hidden: Sequence[int] | None = None) -> MlpModel:
    if S * n < 1 or C < 2:
        raise InvalidArgumentError(f"fusion needs S*n >= 1 and C >= 2, got S*n={S * n}, C={C}")
    widths = [S * n, *_check_hidden(hidden, geometric_widths(S * n, C, FUSION_HIDDEN), "fusion"), C]
    return _build(widths, Activation.SOFTMAX, Role.FUSION, rng)


def build_baseline(S: int, d: int, C: int, rng: np.random.Generator, hidden: Sequence[int] | None = None) -> MlpModel:
    """Same depth as the fusion net with twice the hidden widths."""
    if S * d < 1 or C < 2:
        raise InvalidArgumentError(f"baseline needs S*d >= 1 and C >= 2, got S*d={S * d}, C={C}")
    default = [2 * w for w in geometric_widths(S * d, C, FUSION_HIDDEN)]
    widths = [S * d, *_check_hidden(hidden, default, "baseline"), C]
    return _build(widths, Activation.SOFTMAX, Role.BASELINE, rng)


# ---------------------------------------------------------------------------
# inference


def encode_batch(encoder: MlpModel, x: np.ndarray, budget: int | None = None) -> np.ndarray:
    """Encode an (N, d) batch into an (N, n) uint8 array of bits."""
    if encoder.role is not Role.ENCODER:
        raise InvalidArgumentError(f"expected an encoder, got {encoder.role.name}")
    if budget is not None and encoder.output_dim > budget:
        raise BudgetExceededError(f"code length n={encoder.output_dim} exceeds bit budget R={budget}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != encoder.input_dim:
        raise InvalidArgumentError(f"observation dim {x.shape[-1]} != encoder input dim {encoder.input_dim}")
    return encoder(x).astype(np.uint8)


def encode(encoder: MlpModel, x: np.ndarray, budget: int | None = None, sensor_index: int = 0) -> LatentCode:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError("encode takes a single observation; use encode_batch for batches")
    return LatentCode(encode_batch(encoder, x, budget), sensor_index)


def fuse_predict(fusion: MlpModel, codes: Sequence[LatentCode]) -> np.ndarray:
    """Class probabilities from the concatenated sensor codes, in sensor order."""
    if not codes:
        raise InvalidArgumentError("no codes supplied")
    if [c.sensor_index for c in codes] != list(range(len(codes))):
        raise InvalidArgumentError("codes must be ordered by sensor_index 0..S-1 with none missing")
    z = np.concatenate([c.bits for c in codes]).astype(np.float64)
    if z.shape[0] != fusion.input_dim:
        raise InvalidArgumentError(f"concatenated code length {z.shape[0]} != fusion input dim {fusion.input_dim}")
    return fusion(z)


def baseline_predict(baseline: MlpModel, raw: np.ndarray) -> np.ndarray:
    """Class probabilities from raw observations shaped (S, d) or (N, S, d)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        x = raw.reshape(-1)
    elif raw.ndim == 3:
        x = raw.reshape(raw.shape[0], -1)
    else:
        raise InvalidArgumentError(f"expected (S, d) or (N, S, d) observations, got shape {raw.shape}")
    if x.shape[-1] != baseline.input_dim:
        raise InvalidArgumentError(f"raw input dim {x.shape[-1]} != baseline input dim {baseline.input_dim}")
    return baseline(x)


def fused_forward(bundle: SensorBundle, observations: np.ndarray) -> np.ndarray:
    """Batch version of the distributed predictor: (N, S, d) -> (N, C)."""
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim != 3 or observations.shape[1:] != (bundle.S, bundle.d):
        raise InvalidArgumentError(
            f"observations must be (N, {bundle.S}, {bundle.d}), got {observations.shape}"
        )
    z = np.concatenate(
        [encode_batch(enc, observations[:, i, :], bundle.R) for i, enc in enumerate(bundle.encoders)], axis=1
    )
    return bundle.fusion(z.astype(np.float64))


# ---------------------------------------------------------------------------
# accounting


def flops_estimate(model: MlpModel | SensorBundle | None) -> int:
    """2*in*out multiply-adds + out bias adds + out activation ops, per layer."""
    if model is None:
        return 0
    if isinstance(model, SensorBundle):
        return sum(flops_estimate(m) for m in model.models())
    return sum(2 * l.fan_in * l.fan_out + 2 * l.fan_out for l in model.layers)


def inference_flops(bundle: SensorBundle) -> int:
    """FLOPs on the deployed path: every sensor encoder plus the fusion net."""
    return sum(flops_estimate(e) for e in bundle.encoders) + flops_estimate(bundle.fusion)


def compression_ratio(d: int, n: int) -> Fraction:
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    return Fraction(d, n)


def code_length(d: int, cr: float) -> int:
    """n = ceil(d / CR)."""
    if cr <= 0:
        raise InvalidArgumentError("compression ratio must be positive")
    return math.ceil(Fraction(d) / Fraction(str(cr)))


# ---------------------------------------------------------------------------
# bundle container
#
# magic "GCMP" | u16 version | u32 S, d, n, C, R | u32 model count
# per model: u8 role | u8 frozen | u32 layer count
# per layer: u32 in | u32 out | u8 activation | f64 weights[out*in] | f64 bias[out]
# all little-endian, weights row-major


def _write_model(buf: io.BytesIO, model: MlpModel) -> None:
    buf.write(struct.pack("<BBI", int(model.role), int(model.frozen), len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<IIB", layer.fan_in, layer.fan_out, int(layer.activation)))
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def bundle_to_bytes(bundle: SensorBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<H", BUNDLE_VERSION))
    buf.write(struct.pack("<5I", bundle.S, bundle.d, bundle.n, bundle.C, bundle.R))
    models = bundle.models()
    buf.write(struct.pack("<I", len(models)))
    for m in models:
        _write_model(buf, m)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated bundle: need {size} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, count: int, shape: tuple[int, ...]) -> np.ndarray:
        size = 8 * count
        if self.pos + size > len(self.data):
            raise FormatError(f"truncated bundle: need {size} bytes at offset {self.pos}")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return arr.reshape(shape)


def _read_model(r: _Reader) -> MlpModel:
    offset = r.pos
    role_b, frozen_b, n_layers = r.take("<BBI")
    try:
        role = Role(role_b)
    except ValueError:
        raise FormatError(f"unknown role byte {role_b} at offset {offset}") from None
    layers = []
    for _ in range(n_layers):
        lo = r.pos
        fan_in, fan_out, act_b = r.take("<IIB")
        try:
            act = Activation(act_b)
        except ValueError:
            raise FormatError(f"unknown activation byte {act_b} at offset {lo}") from None
        w = r.array(fan_in * fan_out, (fan_out, fan_in))
        b = r.array(fan_out, (fan_out,))
        layers.append(DenseLayer(w, b, act))
    try:
        return MlpModel(layers, role, frozen=bool(frozen_b))
    except InvalidArgumentError as exc:
        raise FormatError(f"invalid model at offset {offset}: {exc}") from exc


def bundle_from_bytes(data: bytes) -> SensorBundle:
    if data[:4] != BUNDLE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0, expected {BUNDLE_MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.take("<H")
    if version != BUNDLE_VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {version} (this build reads {BUNDLE_VERSION})")
    S, d, n, C, R = r.take("<5I")
    (count,) = r.take("<I")
    models = [_read_model(r) for _ in range(count)]
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes at offset {r.pos}")
    by_role: dict[Role, list[MlpModel]] = {role: [] for role in Role}
    for m in models:
        by_role[m.role].append(m)
    if len(by_role[Role.BASELINE]) != 1 or len(by_role[Role.FUSION]) != 1:
        raise FormatError("bundle must hold exactly one baseline and one fusion model")
    try:
        return SensorBundle(
            by_role[Role.ENCODER], by_role[Role.DECODER], by_role[Role.BASELINE][0], by_role[Role.FUSION][0],
            S, d, n, C, R,
        )
    except InvalidArgumentError as exc:
        raise FormatError(f"inconsistent bundle: {exc}") from exc


def save_bundle(bundle: SensorBundle, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(bundle_to_bytes(bundle))
    return path


def load_bundle(path: str | Path) -> SensorBundle:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read bundle {path}: {exc}") from exc
    return bundle_from_bytes(data)
