"""Dense-network engine: activations, losses, analytic backprop and Adam.

Arrays are float64 numpy arrays with samples along the first axis. A layer
stores ``weights`` as (out, in) and ``bias`` as (out,), so a batch ``x`` of
shape (N, in) maps to ``x @ weights.T + bias``. A 1-D input is treated as a
single sample and a 1-D result is returned.

All logarithms are base 2.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import InvalidArgumentError

CLAMP_EPS = 1e-12
NORMALIZATION_TOL = 1e-6
# CE and KL values are reported on a 2**-36 grid: any two such values below
# 2**16 add and subtract exactly, so distill - ce == kl holds bitwise.
LOSS_GRID = 2.0**-36
_LN2 = math.log(2.0)


class Activation(enum.IntEnum):
    # values double as the on-disk activation byte
    IDENTITY = 0
    RELU = 1
    SIGMOID = 2
    QSIGMOID = 3
    SOFTMAX = 4


FINAL_ONLY = frozenset({Activation.QSIGMOID, Activation.SOFTMAX})


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.bias.shape[0] != self.weights.shape[0]:
            raise InvalidArgumentError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        self.activation = Activation(self.activation)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------------------
# initialization and forward primitives


def he_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (fan_out, fan_in) weight matrix from N(0, 2 / fan_in)."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidArgumentError(f"fan_in and fan_out must be positive, got {fan_in}, {fan_out}")
    return rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def qsigmoid(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard binary quantizer with a straight-through surrogate.

    Returns ``(bits, surrogate_grad)`` where ``bits`` is 1.0 wherever
    ``sigmoid(a) >= 0.5`` (equivalently ``a >= 0``) and 0.0 elsewhere, and
    ``surrogate_grad`` is the sigmoid derivative used in the backward pass.
    """
    a = np.asarray(a, dtype=np.float64)
    s = sigmoid(a)
    bits = (a >= 0).astype(np.float64)
    return bits, s * (1.0 - s)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 1:
        raise InvalidArgumentError("softmax needs at least one element per sample")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activate(kind: Activation, pre: np.ndarray) -> np.ndarray:
    if kind is Activation.IDENTITY:
        return pre
    if kind is Activation.RELU:
        return relu(pre)
    if kind is Activation.SIGMOID:
        return sigmoid(pre)
    if kind is Activation.QSIGMOID:
        return qsigmoid(pre)[0]
    return softmax(pre)


def activation_backward(kind: Activation, pre: np.ndarray, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Map dL/d(output) to dL/d(pre-activation)."""
    if kind is Activation.IDENTITY:
        return grad
    if kind is Activation.RELU:
        return grad * (pre > 0)
    if kind is Activation.SIGMOID:
        return grad * out * (1.0 - out)
    if kind is Activation.QSIGMOID:
        # straight-through: hard bits forward, sigmoid derivative backward
        return grad * qsigmoid(pre)[1]
    return out * (grad - np.sum(grad * out, axis=-1, keepdims=True))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a rank-1 or rank-2 array, got shape {x.shape}")
    return x, False


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x)
    if xb.shape[1] != layer.fan_in:
        raise InvalidArgumentError(f"input width {xb.shape[1]} does not match layer fan_in {layer.fan_in}")
    out = activate(layer.activation, xb @ layer.weights.T + layer.bias)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses


def _on_grid(x: float) -> float:
    return round(x / LOSS_GRID) * LOSS_GRID


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, _ = _as_batch(a)
    b, _ = _as_batch(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise InvalidArgumentError("empty batch")
    return a, b


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over samples of the squared l2 reconstruction error."""
    x, x_hat = _check_same_shape(x, x_hat)
    return float(np.sum((x - x_hat) ** 2) / x.shape[0])


def cross_entropy(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Binary cross-entropy summed over classes, averaged over the batch.

    ``y_hat`` is clamped to ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    y, y_hat = _check_same_shape(y, y_hat)
    q = np.clip(y_hat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    per_sample = -np.sum(y * np.log2(q) + (1.0 - y) * np.log2(1.0 - q), axis=1)
    return _on_grid(float(np.mean(per_sample)))


def _check_normalized(name: str, p: np.ndarray) -> None:
    sums = p.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= NORMALIZATION_TOL):
        raise InvalidArgumentError(f"{name} rows must sum to 1 (worst row sum {sums[np.argmax(np.abs(sums - 1))]!r})")
    if np.any(p < 0):
        raise InvalidArgumentError(f"{name} has negative entries")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in bits, averaged over the batch. Zero-probability terms of p contribute 0."""
    p, q = _check_same_shape(p, q)
    _check_normalized("p", p)
    _check_normalized("q", q)
    qc = np.maximum(q, CLAMP_EPS)
    nz = p > 0
    terms = np.zeros_like(p)
    terms[nz] = p[nz] * np.log2(p[nz] / qc[nz])
    return _on_grid(float(np.mean(terms.sum(axis=1))))


def distill_loss(y: np.ndarray, y_hat: np.ndarray, p_baseline: np.ndarray) -> float:
    return cross_entropy(y, y_hat) + kl_divergence(p_baseline, y_hat)


def mse_grad(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """d mse_loss / d x_hat."""
    x, x_hat = _check_same_shape(x, x_hat)
    return -2.0 * (x - x_hat) / x.shape[0]


def cross_entropy_grad(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """d cross_entropy / d y_hat; zero where the clamp is active."""
    y, y_hat = _check_same_shape(y, y_hat)
    inside = (y_hat > CLAMP_EPS) & (y_hat < 1.0 - CLAMP_EPS)
    q = np.clip(y_hat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    g = -(y / q - (1.0 - y) / (1.0 - q)) / (_LN2 * y.shape[0])
    return np.where(inside, g, 0.0)


def kl_divergence_grad(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d KL(p || q) / d q; ``p`` is treated as a constant."""
    p, q = _check_same_shape(p, q)
    inside = q > CLAMP_EPS
    g = -p / (np.maximum(q, CLAMP_EPS) * _LN2 * p.shape[0])
    return np.where(inside, g, 0.0)


class LossSpec(Protocol):
    def value(self, pred: np.ndarray) -> float: ...

    def grad(self, pred: np.ndarray) -> np.ndarray: ...


@dataclass
class MSELoss:
    target: np.ndarray

    def value(self, pred: np.ndarray) -> float:
        return mse_loss(self.target, pred)

    def grad(self, pred: np.ndarray) -> np.ndarray:
        return mse_grad(self.target, pred)


@dataclass
class CrossEntropyLoss:
    target: np.ndarray

    def value(self, pred: np.ndarray) -> float:
        return cross_entropy(self.target, pred)

    def grad(self, pred: np.ndarray) -> np.ndarray:
        return cross_entropy_grad(self.target, pred)


@dataclass
class DistillLoss:
    """Cross-entropy to the labels plus KL from fixed teacher probabilities."""

    target: np.ndarray
    teacher: np.ndarray

    def value(self, pred: np.ndarray) -> float:
        return distill_loss(self.target, pred, self.teacher)

    def grad(self, pred: np.ndarray) -> np.ndarray:
        return cross_entropy_grad(self.target, pred) + kl_divergence_grad(self.teacher, pred)


# ---------------------------------------------------------------------------
# backprop


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class GradientBundle:
    """Per-layer gradients keyed by layer index; frozen layers are absent."""

    layers: dict[int, LayerGrad] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.layers)

    def __contains__(self, index: int) -> bool:
        return index in self.layers

    def __getitem__(self, index: int) -> LayerGrad:
        return self.layers[index]

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, g in sorted(self.layers.items()):
            out[f"{prefix}{i}.weights"] = g.weights
            out[f"{prefix}{i}.bias"] = g.bias
        return out

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g.weights**2) + np.sum(g.bias**2)) for g in self.layers.values()))


class HasLayers(Protocol):
    layers: list[DenseLayer]
    frozen: bool


@dataclass
class ForwardTrace:
    """Per-layer inputs, pre-activations and outputs from one forward pass."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    outputs: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.inputs[0]


def forward_trace(layers: Sequence[DenseLayer], x: np.ndarray) -> ForwardTrace:
    xb, _ = _as_batch(x)
    trace = ForwardTrace([], [], [])
    h = xb
    for layer in layers:
        if h.shape[1] != layer.fan_in:
            raise InvalidArgumentError(f"input width {h.shape[1]} does not match layer fan_in {layer.fan_in}")
        trace.inputs.append(h)
        a = h @ layer.weights.T + layer.bias
        h = activate(layer.activation, a)
        trace.pre.append(a)
        trace.outputs.append(h)
    if not layers:
        trace.inputs.append(h)
    return trace


def backward_trace(
    layers: Sequence[DenseLayer],
    trace: ForwardTrace,
    grad_out: np.ndarray,
    trainable: Sequence[bool] | None = None,
) -> tuple[GradientBundle, np.ndarray]:
    """Propagate dL/d(output) back through ``layers``.

    Returns the gradient bundle for trainable layers and dL/d(input).
    Non-trainable layers still pass gradients through to earlier layers.
    """
    if trainable is None:
        trainable = [True] * len(layers)
    grads = GradientBundle()
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dpre = activation_backward(layer.activation, trace.pre[i], trace.outputs[i], g)
        if trainable[i]:
            grads.layers[i] = LayerGrad(dpre.T @ trace.inputs[i], dpre.sum(axis=0))
        g = dpre @ layer.weights
    return grads, g


def backprop(
    model: HasLayers,
    x: np.ndarray,
    loss: LossSpec,
    freeze: Sequence[bool] | None = None,
) -> tuple[float, GradientBundle]:
    """Loss value and analytic gradients of ``loss(model(x))``.

    ``freeze`` marks layers that receive no gradient entry; by default every
    layer of a frozen model is frozen and none of an unfrozen one.
    """
    if freeze is None:
        freeze = [model.frozen] * len(model.layers)
    if len(freeze) != len(model.layers):
        raise InvalidArgumentError("freeze mask length must equal the number of layers")
    trace = forward_trace(model.layers, x)
    value = loss.value(trace.output)
    grads, _ = backward_trace(model.layers, trace, loss.grad(trace.output), [not f for f in freeze])
    return value, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Only keys present in ``grads`` are updated. Moment buffers are created on
    first use with the parameter's shape.
    """
    for key, g in grads.items():
        if key not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter '{key}'")
        if params[key].shape != g.shape:
            raise InvalidArgumentError(f"shape mismatch for '{key}': {params[key].shape} vs {g.shape}")
        if key in state.m and state.m[key].shape != g.shape:
            raise InvalidArgumentError(f"optimizer state shape mismatch for '{key}'")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for key, g in grads.items():
        m = state.m.setdefault(key, np.zeros_like(g))
        v = state.v.setdefault(key, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[key] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
