"""Small fully-connected classifier with hand-derived gradients.

Weights live in a flat ParameterVector so that evaluation models can be
built by plain arithmetic in weight space. Storage is float32; every
reduction (forward, loss, gradient, SGD update) accumulates in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Input does not match the network's expected dimensions."""


class LayoutError(ValueError):
    """Two parameter vectors with different layouts were combined."""


Layout = tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class ParameterVector:
    """Flat weight vector plus the named-segment layout it was built from.

    Vectors are combinable (added, scaled) only when layouts are equal.
    Treat instances as immutable: every operation returns a new vector.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        expected = sum(count for _, count in self.layout)
        if self.values.ndim != 1 or len(self.values) != expected:
            raise LayoutError(
                f"value length {self.values.shape} does not match layout total {expected}"
            )

    def _check_layout(self, other: "ParameterVector"):
        if self.layout != other.layout:
            raise LayoutError(f"layout mismatch: {self.layout} vs {other.layout}")

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        self._check_layout(other)
        return ParameterVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        self._check_layout(other)
        return ParameterVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParameterVector":
        return ParameterVector(self.values * scalar, self.layout)

    __rmul__ = __mul__

    def astype(self, dtype) -> "ParameterVector":
        return ParameterVector(self.values.astype(dtype), self.layout)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return len(self.values)


def layout_for_sizes(layer_sizes: Sequence[int]) -> Layout:
    """Weight/bias segments, in order, for a dense net of the given sizes."""
    records = []
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        records.append((f"w{i}", n_in * n_out))
        records.append((f"b{i}", n_out))
    return tuple(records)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    passes_per_batch: int = 3

    def validate(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.passes_per_batch < 1:
            raise ValueError(f"passes_per_batch must be >= 1, got {self.passes_per_batch}")


@dataclass(frozen=True)
class Network:
    """Dense ReLU classifier. Immutable; sgd_step returns a successor value."""

    layer_sizes: tuple[int, ...]
    parameters: ParameterVector
    activation: str = "relu"

    def __post_init__(self):
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.parameters.layout != layout_for_sizes(self.layer_sizes):
            raise LayoutError("parameter layout does not match layer sizes")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @staticmethod
    def init(layer_sizes: Sequence[int], rng: np.random.Generator) -> "Network":
        """Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"need at least input and output sizes >= 1, got {sizes}")
        chunks = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (n_in + n_out))
            chunks.append(rng.uniform(-bound, bound, n_in * n_out).astype(np.float32))
            chunks.append(np.zeros(n_out, dtype=np.float32))
        values = np.concatenate(chunks)
        return Network(sizes, ParameterVector(values, layout_for_sizes(sizes)))

    def with_parameters(self, params: ParameterVector) -> "Network":
        return Network(self.layer_sizes, params, self.activation)


def _unpack(net: Network, dtype=np.float64) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slice the flat vector into (weight matrix, bias) pairs."""
    vals = np.asarray(net.parameters.values, dtype=dtype)
    layers = []
    ofs = 0
    for n_in, n_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        w = vals[ofs:ofs + n_in * n_out].reshape(n_in, n_out)
        ofs += n_in * n_out
        b = vals[ofs:ofs + n_out]
        ofs += n_out
        layers.append((w, b))
    return layers


def _forward_cached(net: Network, x: np.ndarray):
    """Forward pass returning logits plus per-layer inputs for backprop."""
    layers = _unpack(net)
    h = np.asarray(x, dtype=np.float64)
    inputs = []
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h, inputs


def _as_batch(net: Network, features: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(features)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected features of dimension {net.input_dim}, got shape {x.shape}")
    return x, single


def forward(net: Network, features: np.ndarray) -> np.ndarray:
    """Pre-softmax logits for one feature vector or an (n, d) batch."""
    x, single = _as_batch(net, features)
    logits, _ = _forward_cached(net, x)
    return logits[0] if single else logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(net: Network, features: np.ndarray) -> np.ndarray:
    """Softmax of forward; rows are positive and sum to one."""
    return _softmax(forward(net, features))


def predict_labels(net: Network, features: np.ndarray) -> np.ndarray:
    return np.argmax(forward(net, features), axis=-1)


# --- loss specifications -------------------------------------------------

@dataclass(frozen=True)
class CrossEntropy:
    """Mean cross-entropy of softmax predictions against integer labels."""


@dataclass(frozen=True)
class MaskedCrossEntropy:
    """Cross-entropy with softmax restricted to an allowed class subset.

    Masked-out classes receive exactly zero probability and zero gradient.
    """

    classes: frozenset[int]


@dataclass(frozen=True)
class MseOnLogits:
    """Squared error between logits and stored target logits.

    Mean over batch rows and classes; the logit-matching penalty used by
    logit-replay training.
    """

    targets: np.ndarray


@dataclass(frozen=True)
class DistillTo:
    """Cross-entropy against a frozen teacher's softmax (soft targets)."""

    teacher_logits: np.ndarray
    temperature: float = 1.0


LossSpec = CrossEntropy | MaskedCrossEntropy | MseOnLogits | DistillTo


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _loss_grad_logits(logits: np.ndarray, labels, spec: LossSpec):
    """Loss value and d(loss)/d(logits) for a batch, all float64."""
    n, n_classes = logits.shape
    if isinstance(spec, CrossEntropy):
        logp = _log_softmax(logits)
        y = np.asarray(labels, dtype=np.intp)
        loss = -logp[np.arange(n), y].mean()
        dz = _softmax(logits)
        dz[np.arange(n), y] -= 1.0
        return loss, dz / n
    if isinstance(spec, MaskedCrossEntropy):
        if not spec.classes:
            raise ValueError("masked_cross_entropy requires a non-empty class mask")
        mask = np.zeros(n_classes, dtype=bool)
        mask[list(spec.classes)] = True
        y = np.asarray(labels, dtype=np.intp)
        if not mask[y].all():
            raise ValueError("labels outside the masked class set")
        masked = np.where(mask, logits, -np.inf)
        z = masked - masked.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)       # exactly zero on masked-out classes
        loss = -np.log(p[np.arange(n), y]).mean()
        dz = p.copy()
        dz[np.arange(n), y] -= 1.0
        return loss, dz / n
    if isinstance(spec, MseOnLogits):
        t = np.asarray(spec.targets, dtype=np.float64)
        if t.shape != logits.shape:
            raise ShapeError(f"target logits shape {t.shape} != logits shape {logits.shape}")
        diff = logits - t
        loss = np.mean(diff ** 2)
        return loss, 2.0 * diff / diff.size
    if isinstance(spec, DistillTo):
        temp = spec.temperature
        t = np.asarray(spec.teacher_logits, dtype=np.float64)
        if t.shape != logits.shape:
            raise ShapeError(f"teacher logits shape {t.shape} != logits shape {logits.shape}")
        q = _softmax(t / temp)
        logp = _log_softmax(logits / temp)
        loss = -(q * logp).sum(axis=-1).mean()
        dz = (_softmax(logits / temp) - q) / (n * temp)
        return loss, dz
    raise TypeError(f"unknown loss spec {spec!r}")


def loss_and_grad(net: Network, features: np.ndarray, labels, spec: LossSpec = CrossEntropy()):
    """Batch-mean loss and its gradient (float64, same layout as the net).

    ``labels`` may be None for specs that carry their own targets.
    """
    x, _ = _as_batch(net, features)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    logits, inputs = _forward_cached(net, x)
    loss, dz = _loss_grad_logits(logits, labels, spec)

    layers = _unpack(net)
    grads: list[np.ndarray | None] = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h = inputs[i]
        grads[2 * i] = (h.T @ dz).ravel()
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            dz = dz @ w.T
            dz[inputs[i] <= 0.0] = 0.0       # inputs[i] is the post-ReLU activation
    flat = np.concatenate(grads)
    return float(loss), ParameterVector(flat, net.parameters.layout)


def sgd_step(net: Network, grad: ParameterVector, cfg: SgdConfig) -> Network:
    """parameters <- parameters - learning_rate * grad, in a new Network."""
    if grad.layout != net.parameters.layout:
        raise LayoutError("gradient layout does not match network parameters")
    updated = net.parameters.values.astype(np.float64) - cfg.learning_rate * grad.values
    new = ParameterVector(updated.astype(net.parameters.values.dtype), net.parameters.layout)
    return net.with_parameters(new)


# --- checkpoint file format ----------------------------------------------

def save_checkpoint(params: ParameterVector, path) -> None:
    """Write a text layout header followed by little-endian float32 values."""
    header = "layout: " + ";".join(f"({name},{count})" for name, count in params.layout)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(params.values, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParameterVector:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").rstrip("\n")
        payload = fh.read()
    if not header.startswith("layout: "):
        raise ValueError(f"{path}: missing layout header")
    records = []
    body = header[len("layout: "):]
    for part in body.split(";"):
        if not (part.startswith("(") and part.endswith(")")):
            raise ValueError(f"{path}: malformed layout record {part!r}")
        name, count = part[1:-1].rsplit(",", 1)
        records.append((name, int(count)))
    layout = tuple(records)
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    expected = sum(c for _, c in layout)
    if len(values) != expected:
        raise ValueError(f"{path}: payload holds {len(values)} floats, layout expects {expected}")
    return ParameterVector(values, layout)
