"""Multilayer perceptron classifiers: init, forward, training, prediction, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NumericError, Tape, gradient

MAGIC = b"EVEC"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Dense layers as (weight [in x out], bias [out]); relu between layers."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input width does not chain")
        if self.n_classes < 2:
            raise ValueError("output width must be at least 2")
        for w, b in self.layers:
            w.setflags(write=False)
            b.setflags(write=False)

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        layers, k = [], 0
        for w, b in self.layers:
            nw = vec[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            nb = vec[k:k + b.size].copy()
            k += b.size
            layers.append((nw, nb))
        return ModelParams(tuple(layers))

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array."""
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def mlp_init(layer_sizes: Sequence[int], seed: int) -> ModelParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if any(s <= 0 for s in sizes):
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelParams(tuple(layers))


def _check_input(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.n_inputs:
        raise ValueError(f"input shape {X.shape} does not match {params.n_inputs} features")
    return X


def forward(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Logits [n x K]."""
    h = _check_input(params, X)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def forward_tape(tape: Tape, param_ids: Sequence[int], x_id: int) -> int:
    """Record the forward pass; ``param_ids`` alternates weight, bias per layer."""
    h = x_id
    n_layers = len(param_ids) // 2
    for i in range(n_layers):
        h = tape.apply("add", tape.apply("matmul", h, param_ids[2 * i]), param_ids[2 * i + 1])
        if i < n_layers - 1:
            h = tape.apply("relu", h)
    return h


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return out


def loss_ce(tape: Tape, logits_id: int, labels: np.ndarray) -> int:
    """Mean cross-entropy node for integer labels."""
    n_classes = tape.value(logits_id).shape[1]
    return tape.apply("softmax_ce", logits_id, tape.const(one_hot(labels, n_classes)))


def cross_entropy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    z = forward(params, X)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), np.asarray(y, dtype=np.int64)]))


def ce_grad(params: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its gradient for each parameter array."""
    return _ce_grad_arrays(params.arrays(), _check_input(params, X), y)


def _ce_grad_arrays(arrays, X, y):
    tape = Tape()
    ids = [tape.leaf(a, requires_grad=True) for a in arrays]
    x_id = tape.const(X)
    loss = loss_ce(tape, forward_tape(tape, ids, x_id), y)
    grads = gradient(tape, loss, ids)
    return float(tape.value(loss)), [tape.value(g) for g in grads]


def train(params: ModelParams, X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> ModelParams:
    """Minibatch SGD with heavy-ball momentum; reshuffles every epoch from cfg.seed."""
    X = _check_input(params, X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.epochs == 0:
        return params
    rng = np.random.default_rng(cfg.seed)
    weights = [a.copy() for a in params.arrays()]
    velocity = [np.zeros_like(a) for a in weights]
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _ce_grad_arrays(weights, X[idx], y[idx])
            for w, v, g in zip(weights, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                w += v
        if not all(np.all(np.isfinite(w)) for w in weights):
            raise NumericError("training diverged")
    return ModelParams(tuple(zip(weights[0::2], weights[1::2])))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(logits)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(params: ModelParams, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Predicted class (ties go to the lowest index) and the probability vector."""
    probs = softmax(forward(params, x))[0]
    return int(np.argmax(probs)), probs


def predict_batch(params: ModelParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = softmax(forward(params, X))
    return np.argmax(probs, axis=1), probs


def accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    if y.shape[0] == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred, _ = predict_batch(params, X)
    return float(np.mean(pred == y))


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write the little-endian "EVEC" checkpoint format."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.layers))]
    for w, b in params.layers:
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if len(data) < 12:
        raise CheckpointFormatError("truncated header")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    offset, layers = 12, []
    for i in range(n_layers):
        if len(data) < offset + 8:
            raise CheckpointFormatError(f"truncated at layer {i} header")
        n_in, n_out = struct.unpack_from("<II", data, offset)
        offset += 8
        need = 8 * (n_in * n_out + n_out)
        if len(data) < offset + need:
            raise CheckpointFormatError(f"truncated at layer {i} payload")
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=offset)
        offset += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=offset)
        offset += 8 * n_out
        layers.append((w.reshape(n_in, n_out).astype(np.float64), b.astype(np.float64)))
    if offset != len(data):
        raise CheckpointFormatError("trailing bytes after last layer")
    try:
        return ModelParams(tuple(layers))
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
