"""Small numpy classifier: softmax regression or a one-hidden-layer tanh MLP,
trained with Adam (L2 weight decay folded into the gradient)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .errors import ConfigurationError, DataError, NonFiniteGradientError, TrainingDivergedError

PROB_FLOOR = 1e-12

SOFTMAX_LAYERS = ("weights", "bias")
MLP_LAYERS = ("hidden.weights", "hidden.bias", "output.weights", "output.bias")


# --------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ModelParameters:
    """Flat float64 parameter vector plus (name, dims) layout and a version counter."""

    values: np.ndarray
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    version: int = 1

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        shapes = tuple((str(name), tuple(int(d) for d in dims)) for name, dims in self.shapes)
        expected = sum(math.prod(dims) for _, dims in shapes)
        if values.size != expected:
            raise ConfigurationError(f"parameter count {values.size} does not match shapes ({expected})")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", shapes)

    def __len__(self):
        return self.values.size

    def layers(self) -> dict[str, np.ndarray]:
        """Views into ``values`` keyed by layer name."""
        out, offset = {}, 0
        for name, dims in self.shapes:
            n = math.prod(dims)
            out[name] = self.values[offset : offset + n].reshape(dims)
            offset += n
        return out

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1][0]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][1][0]

    @property
    def hidden_units(self) -> int:
        return self.shapes[0][1][1] if len(self.shapes) == 4 else 0

    def with_values(self, values, version: int | None = None) -> "ModelParameters":
        return ModelParameters(values, self.shapes, self.version if version is None else version)

    def bumped(self) -> "ModelParameters":
        return ModelParameters(self.values.copy(), self.shapes, self.version + 1)

    def to_bytes(self) -> bytes:
        return encode_parameters(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParameters":
        return decode_parameters(data)

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return (
            self.shapes == other.shapes
            and self.version == other.version
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def _layout(input_dim: int, num_classes: int, hidden_units: int = 0):
    if input_dim < 1 or num_classes < 2 or hidden_units < 0:
        raise ConfigurationError("need input_dim >= 1, num_classes >= 2, hidden_units >= 0")
    if hidden_units == 0:
        return ((SOFTMAX_LAYERS[0], (input_dim, num_classes)), (SOFTMAX_LAYERS[1], (num_classes,)))
    return (
        (MLP_LAYERS[0], (input_dim, hidden_units)),
        (MLP_LAYERS[1], (hidden_units,)),
        (MLP_LAYERS[2], (hidden_units, num_classes)),
        (MLP_LAYERS[3], (num_classes,)),
    )


def init_parameters(input_dim: int, num_classes: int, hidden_units: int = 0, seed: int = 0) -> ModelParameters:
    """Zeros for softmax regression; the MLP hidden layer is drawn from
    U(-1/sqrt(input_dim), 1/sqrt(input_dim)), everything else starts at zero."""
    shapes = _layout(input_dim, num_classes, hidden_units)
    values = np.zeros(sum(math.prod(d) for _, d in shapes))
    if hidden_units:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x1A17])))
        bound = 1.0 / math.sqrt(input_dim)
        values[: input_dim * hidden_units] = rng.uniform(-bound, bound, input_dim * hidden_units)
    return ModelParameters(values, shapes, version=1)


# Binary layout: b"PHTP" | varint layer count | per layer: varint name length,
# UTF-8 name, varint ndim, varint dims | varint version | float64 LE values.

_PARAM_MAGIC = b"PHTP"


def _write_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(buf):
            raise DataError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise DataError("varint too long")


def encode_parameters(params: ModelParameters) -> bytes:
    out = bytearray(_PARAM_MAGIC)
    _write_varint(out, len(params.shapes))
    for name, dims in params.shapes:
        raw = name.encode("utf-8")
        _write_varint(out, len(raw))
        out += raw
        _write_varint(out, len(dims))
        for d in dims:
            _write_varint(out, d)
    _write_varint(out, params.version)
    out += params.values.astype("<f8", copy=False).tobytes()
    return bytes(out)


def decode_parameters(data: bytes) -> ModelParameters:
    if data[:4] != _PARAM_MAGIC:
        raise DataError("not a parameter blob")
    pos = 4
    count, pos = _read_varint(data, pos)
    shapes = []
    for _ in range(count):
        n, pos = _read_varint(data, pos)
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        ndim, pos = _read_varint(data, pos)
        dims = []
        for _ in range(ndim):
            d, pos = _read_varint(data, pos)
            dims.append(d)
        shapes.append((name, tuple(dims)))
    version, pos = _read_varint(data, pos)
    expected = sum(math.prod(d) for _, d in shapes)
    if len(data) - pos != 8 * expected:
        raise DataError(f"expected {8 * expected} value bytes, found {len(data) - pos}")
    values = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    return ModelParameters(values, shapes, version)


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 40
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # Adam moments are reset at every station hop unless this is set.
    carry_optimizer_state: bool = False

    def __post_init__(self):
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            raise ConfigurationError("epochs must be a non-negative integer")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not self.weight_decay >= 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigurationError("batch_size must be a positive integer")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigurationError("seed must be an unsigned integer")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int


# --------------------------------------------------------------------------- model


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(batch, np.ndarray):
        return np.atleast_2d(np.asarray(batch, dtype=np.float64)), None
    batch = list(batch)
    if not batch:
        raise ConfigurationError("empty batch")
    x = np.stack([np.asarray(s.features, dtype=np.float64).ravel() for s in batch])
    y = np.array([s.label for s in batch], dtype=np.int64)
    return x, y


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _forward(params: ModelParameters, x: np.ndarray):
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("empty batch")
    if x.shape[1] != params.input_dim:
        raise ConfigurationError(f"feature length {x.shape[1]} != model input dimension {params.input_dim}")
    layers = params.layers()
    if params.hidden_units:
        h = np.tanh(x @ layers["hidden.weights"] + layers["hidden.bias"])
        logits = h @ layers["output.weights"] + layers["output.bias"]
        return _softmax(logits), h
    return _softmax(x @ layers["weights"] + layers["bias"]), None


def forward(params: ModelParameters, batch) -> np.ndarray:
    """Class-probability rows for a batch (LabeledSample sequence or feature matrix)."""
    x, _ = _as_arrays(batch)
    return _forward(params, x)[0]


def predict(params: ModelParameters, features: np.ndarray) -> np.ndarray:
    return forward(params, features).argmax(axis=1)


def cross_entropy(probabilities, labels) -> float:
    """Mean negative log-probability of the true classes, floored at 1e-12."""
    p = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape[0] != y.size or y.size == 0:
        raise ConfigurationError("probabilities and labels must be non-empty and aligned")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise DataError("label out of range")
    true_p = p[np.arange(y.size), y]
    return float(-np.mean(np.log(np.maximum(true_p, PROB_FLOOR))))


def loss_and_gradient(params: ModelParameters, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``params.values``.

    Weight decay is *not* included here; :func:`adam_step` adds it.
    """
    y = np.asarray(y, dtype=np.int64)
    probs, hidden = _forward(params, x)
    n = x.shape[0]
    loss = cross_entropy(probs, y)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if hidden is None:
        grads = [x.T @ delta, delta.sum(axis=0)]
    else:
        w_out = params.layers()["output.weights"]
        d_hidden = (delta @ w_out.T) * (1.0 - hidden * hidden)
        grads = [x.T @ d_hidden, d_hidden.sum(axis=0), hidden.T @ delta, delta.sum(axis=0)]
    return loss, np.concatenate([g.ravel() for g in grads])


def objective(params: ModelParameters, x, y, weight_decay: float = 0.0) -> float:
    """Cross-entropy plus the L2 penalty ``weight_decay/2 * ||theta||^2``."""
    probs, _ = _forward(params, np.asarray(x, dtype=np.float64))
    return cross_entropy(probs, y) + 0.5 * weight_decay * float(params.values @ params.values)


# --------------------------------------------------------------------------- Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(values, gradient, state: AdamState, config: TrainingConfig):
    """One Adam update. Returns ``(new_values, new_state)``; inputs are not mutated.

    ``values`` may be a ModelParameters (returned with the same version) or an array.
    """
    theta = values.values if isinstance(values, ModelParameters) else np.asarray(values, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != theta.shape:
        raise ConfigurationError(f"gradient length {g.size} != parameter length {theta.size}")
    bad = ~np.isfinite(g)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NonFiniteGradientError(f"{idx.size} non-finite gradient entries (first at index {idx[0]}); step rejected")
    if config.weight_decay:
        g = g + config.weight_decay * theta
    t = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    new_state = AdamState(m, v, t)
    if isinstance(values, ModelParameters):
        return values.with_values(new), new_state
    return new, new_state


# --------------------------------------------------------------------------- training loop


def epoch_generator(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on (seed, epoch, stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, stream])))


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) for one epoch."""
    return epoch_generator(seed, epoch).permutation(n)


@dataclass
class LocalResult:
    params: ModelParameters
    losses: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    optimizer_state: AdamState | None = None

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None


def evaluate_params(params: ModelParameters, features, labels) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    probs = forward(params, features)
    cm = metrics.ConfusionMatrix.from_labels(labels, probs.argmax(axis=1), params.num_classes)
    out = metrics.evaluate(cm)
    out["loss"] = cross_entropy(probs, labels)
    return out


def train_local(
    params: ModelParameters,
    features,
    labels,
    config: TrainingConfig,
    *,
    validation: tuple | None = None,
    epoch_features: Callable[[int], np.ndarray] | None = None,
    epoch_offset: int = 0,
    optimizer_state: AdamState | None = None,
) -> LocalResult:
    """Epoch-based minibatch training.

    ``epoch_features(global_epoch)`` may supply freshly augmented training
    features each epoch; otherwise ``features`` is used as is. Shuffling and
    augmentation are keyed on ``epoch_offset + epoch`` so consecutive visits
    draw fresh randomness. The last partial minibatch is kept.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("training split is empty")
    if x.shape[0] != y.size:
        raise ConfigurationError("features and labels differ in length")
    if x.shape[1] != params.input_dim:
        raise ConfigurationError(f"feature length {x.shape[1]} != model input dimension {params.input_dim}")
    if y.min() < 0 or y.max() >= params.num_classes:
        raise DataError("label out of range")

    state = optimizer_state if optimizer_state is not None else AdamState.zeros(len(params))
    current = params
    result = LocalResult(params=params.bumped(), optimizer_state=state)
    n, bs = y.size, config.batch_size
    for e in range(config.epochs):
        g_epoch = epoch_offset + e
        xe = x if epoch_features is None else np.asarray(epoch_features(g_epoch), dtype=np.float64)
        order = shuffle_order(n, config.seed, g_epoch)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grad = loss_and_gradient(current, xe[idx], y[idx])
            if not math.isfinite(loss):
                result.params = current.bumped()
                result.optimizer_state = state
                raise TrainingDivergedError(f"loss diverged in epoch {g_epoch}", partial=result)
            current, state = adam_step(current, grad, state, config)
            total += loss * idx.size
        epoch_loss = total / n
        result.losses.append(epoch_loss)
        if validation is not None and len(validation[1]):
            result.validation.append(evaluate_params(current, validation[0], validation[1]))
    result.params = current.bumped()
    result.optimizer_state = state
    return result


def fit_samples(params: ModelParameters, samples: Sequence[LabeledSample], config: TrainingConfig, **kw) -> LocalResult:
    """train_local over a LabeledSample sequence."""
    x, y = _as_arrays(samples)
    return train_local(params, x, y, config, **kw)

