"""Small feed-forward softmax classifiers trained with plain minibatch SGD.

Parameters live in one flat float64 vector, laid out layer by layer as
``W1 (fan_in x fan_out, row-major), b1, W2, b2, ...``. All randomness flows
through :class:`RngKey`, so a sub-run is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
STREAMS = ("shuffle", "augment", "init", "attack")


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 4
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector for each layer."""
        out = []
        pos = 0
        for fan_in, fan_out in self.layer_dims:
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b))
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True, eq=False)
class ModelWeights:
    arch: ModelArch
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).ravel()
        if vals.size != self.arch.num_params:
            raise ValueError(
                f"expected {self.arch.num_params} parameters, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("weights must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for (fan_in, fan_out), (ws, bs) in zip(self.arch.layer_dims, self.arch.slices()):
            out.append((self.values[ws].reshape(fan_in, fan_out), self.values[bs]))
        return out

    def with_values(self, values) -> "ModelWeights":
        return ModelWeights(self.arch, values)

    def same_as(self, other: "ModelWeights") -> bool:
        return self.arch == other.arch and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class SubRunSpec:
    steps: int
    learning_rate: float
    batch_size: int
    start_step: int = 0
    augment_noise_std: float = 0.01

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("a sub-run needs at least one step")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning rate must be finite and non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.start_step < 0:
            raise ValueError("start step must be >= 0")
        if self.augment_noise_std < 0:
            raise ValueError("augment noise std must be >= 0")


@dataclass(frozen=True)
class RngKey:
    """Names one random stream.

    The generator seed is the first 8 bytes (little-endian) of
    BLAKE2b-256 over ``"rttd|seed|server|subrun|stream|child"``; the
    generator itself is numpy's PCG64 seeded with that integer.
    """

    scenario_seed: int
    server_id: int
    subrun_index: int
    stream: str = "shuffle"

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}")

    def for_stream(self, stream: str) -> "RngKey":
        return replace(self, stream=stream)

    def seed64(self, child: int = 0) -> int:
        text = (
            f"rttd|{int(self.scenario_seed)}|{int(self.server_id)}|"
            f"{int(self.subrun_index)}|{self.stream}|{int(child)}"
        )
        digest = hashlib.blake2b(text.encode(), digest_size=32).digest()
        return int.from_bytes(digest[:8], "little")

    def generator(self, child: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed64(child)))


def init_weights(arch: ModelArch, key: RngKey) -> ModelWeights:
    """Scaled uniform init: U(-a, a), a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = key.for_stream("init").generator()
    values = np.zeros(arch.num_params)
    for (fan_in, fan_out), (ws, _) in zip(arch.layer_dims, arch.slices()):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        values[ws] = rng.uniform(-a, a, size=fan_in * fan_out)
    return ModelWeights(arch, values)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _check_input(weights: ModelWeights, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != weights.arch.input_dim:
        raise ValueError(
            f"input has dimension {arr.shape[-1]}, model expects {weights.arch.input_dim}"
        )
    return arr, single


def _forward_cache(weights: ModelWeights, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer, input first, logits last."""
    acts = [x]
    layers = weights.layers()
    h = x
    for idx, (w, b) in enumerate(layers):
        z = h @ w + b
        h = z if idx == len(layers) - 1 else _activate(z, weights.arch.activation)
        acts.append(h)
    return acts


def forward(weights: ModelWeights, x) -> np.ndarray:
    """Pre-softmax logits for one input vector or a batch of rows."""
    arr, single = _check_input(weights, x)
    logits = _forward_cache(weights, arr)[-1]
    return logits[0] if single else logits


def forward_hidden(weights: ModelWeights, x) -> np.ndarray:
    """Activation of the last hidden layer."""
    if not weights.arch.hidden_dims:
        raise ValueError("model has no hidden layer")
    arr, single = _check_input(weights, x)
    hidden = _forward_cache(weights, arr)[-2]
    return hidden[0] if single else hidden


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def backward(weights: ModelWeights, acts: list[np.ndarray], dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient given the forward cache and d(objective)/d(logits)."""
    grad = np.zeros(weights.arch.num_params)
    layers = weights.layers()
    slices = weights.arch.slices()
    delta = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        ws, bs = slices[idx]
        grad[ws] = (acts[idx].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if idx > 0:
            delta = delta @ w.T
            h = acts[idx]
            if weights.arch.activation == "relu":
                delta = delta * (h > 0)
            else:
                delta = delta * (1.0 - h * h)
    return grad


def loss_and_grad(weights: ModelWeights, features, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its flat gradient."""
    x, _ = _check_input(weights, features)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if x.shape[0] == 0 or y.size == 0:
        raise ValueError("empty batch")
    if y.size != x.shape[0]:
        raise ValueError("features and labels differ in length")
    if np.any(y < 0) or np.any(y >= weights.arch.num_classes):
        raise ValueError("label out of range")
    acts = _forward_cache(weights, x)
    logits = acts[-1]
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(y.size)
    loss = float(np.mean(logsum - shifted[rows, y]))
    dlogits = softmax(logits)
    dlogits[rows, y] -= 1.0
    dlogits /= y.size
    return loss, backward(weights, acts, dlogits)


def iter_minibatches(dataset, spec: SubRunSpec, key: RngKey) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(step, features, labels)`` for each of ``spec.steps`` updates.

    Order is a key-seeded permutation, redrawn when fewer than a batch of
    examples remain; Gaussian jitter comes from the augment stream.
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = features.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if spec.batch_size > n:
        raise ValueError("batch size exceeds dataset size")
    shuffle_rng = key.for_stream("shuffle").generator()
    augment_rng = key.for_stream("augment").generator()
    perm = shuffle_rng.permutation(n)
    pos = 0
    for step in range(spec.steps):
        if pos + spec.batch_size > n:
            perm = shuffle_rng.permutation(n)
            pos = 0
        idx = perm[pos:pos + spec.batch_size]
        pos += spec.batch_size
        xb = features[idx]
        if spec.augment_noise_std > 0:
            xb = xb + spec.augment_noise_std * augment_rng.standard_normal(xb.shape)
        yield step, xb, labels[idx]


def train_subrun(weights: ModelWeights, dataset, spec: SubRunSpec, key: RngKey) -> ModelWeights:
    if dataset.features.shape[1] != weights.arch.input_dim:
        raise ValueError("dataset dimension does not match the model")
    values = weights.values.copy()
    current = weights
    for _, xb, yb in iter_minibatches(dataset, spec, key):
        _, grad = loss_and_grad(current, xb, yb)
        values = values - spec.learning_rate * grad
        current = ModelWeights(weights.arch, values)
    return current


def predict(weights: ModelWeights, x) -> np.ndarray:
    return np.argmax(forward(weights, np.atleast_2d(x)), axis=1)


def evaluate_accuracy(weights: ModelWeights, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    pred = predict(weights, dataset.features)
    return float(np.mean(pred == np.asarray(dataset.labels)))


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "rttd-checkpoint/1"
_BINARY_MAGIC = b"RTTDCKB1"


@dataclass(frozen=True, eq=False)
class Checkpoint:
    weights: ModelWeights
    step: int = 0
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be >= 0")
        object.__setattr__(
            self, "metadata", {str(k): str(v) for k, v in self.metadata.items()}
        )

    def same_as(self, other: "Checkpoint") -> bool:
        return (
            self.weights.same_as(other.weights)
            and self.step == other.step
            and self.metadata == other.metadata
        )


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def encode_checkpoint(ckpt: Checkpoint) -> str:
    """Text form: JSON object with values as 17-significant-digit decimals.

    ``{"format": "rttd-checkpoint/1", "arch": {...}, "step": int,
    "metadata": {str: str}, "values": [..]}``
    """
    head = {
        "format": CHECKPOINT_FORMAT,
        "arch": ckpt.weights.arch.to_dict(),
        "step": ckpt.step,
        "metadata": dict(sorted(ckpt.metadata.items())),
    }
    body = json.dumps(head, sort_keys=True)[:-1]
    values = ", ".join(format_float(v) for v in ckpt.weights.values)
    return f'{body}, "values": [{values}]}}\n'


def decode_checkpoint(text: str) -> Checkpoint:
    data = json.loads(text)
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unknown checkpoint format {data.get('format')!r}")
    arch = ModelArch.from_dict(data["arch"])
    weights = ModelWeights(arch, np.array(data["values"], dtype=np.float64))
    return Checkpoint(weights, int(data["step"]), dict(data.get("metadata", {})))


def encode_checkpoint_binary(ckpt: Checkpoint) -> bytes:
    """Magic, u32 header length, JSON header, u64 count, little-endian f64 values."""
    head = json.dumps(
        {
            "format": CHECKPOINT_FORMAT,
            "arch": ckpt.weights.arch.to_dict(),
            "step": ckpt.step,
            "metadata": dict(sorted(ckpt.metadata.items())),
        },
        sort_keys=True,
    ).encode()
    vals = ckpt.weights.values.astype("<f8")
    return (
        _BINARY_MAGIC
        + struct.pack("<I", len(head))
        + head
        + struct.pack("<Q", vals.size)
        + vals.tobytes()
    )


def decode_checkpoint_binary(blob: bytes) -> Checkpoint:
    if blob[:8] != _BINARY_MAGIC:
        raise ValueError("not a binary checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    head = json.loads(blob[12:12 + hlen].decode())
    pos = 12 + hlen
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    vals = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    arch = ModelArch.from_dict(head["arch"])
    return Checkpoint(ModelWeights(arch, vals), int(head["step"]), dict(head.get("metadata", {})))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = str(path)
    if path.endswith(".bin"):
        with open(path, "wb") as fh:
            fh.write(encode_checkpoint_binary(ckpt))
    else:
        with open(path, "w") as fh:
            fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] == _BINARY_MAGIC:
        return decode_checkpoint_binary(blob)
    return decode_checkpoint(blob.decode())


def stack_values(models: Sequence[ModelWeights]) -> np.ndarray:
    return np.stack([m.values for m in models])
