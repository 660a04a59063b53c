"""Tiny convolutional classifiers: forward pass, training loop, file format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAGIC = b"KARMMODL"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed or inconsistent model files and specs."""


def default_arch(in_ch: int, height: int, width: int, num_classes: int) -> list[dict]:
    h, w = height - 4, width - 4
    return [
        {"type": "conv2d", "kernel": 3, "in_ch": in_ch, "out_ch": 8},
        {"type": "relu"},
        {"type": "conv2d", "kernel": 3, "in_ch": 8, "out_ch": 16},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "dense", "in": 16 * h * w, "out": num_classes},
    ]


def _param_shapes(layer: dict) -> list[tuple]:
    kind = layer["type"]
    if kind == "conv2d":
        k = layer["kernel"]
        return [(layer["out_ch"], layer["in_ch"], k, k), (layer["out_ch"],)]
    if kind == "dense":
        return [(layer["in"], layer["out"]), (layer["out"],)]
    if kind in ("relu", "flatten"):
        return []
    raise ModelFormatError(f"unknown layer type {kind!r}")


def validate_arch(layers: list[dict], num_classes: int, input_shape: tuple) -> None:
    """Walk the layer list checking that consecutive shapes line up."""
    if num_classes < 2:
        raise ModelFormatError(f"num_classes must be >= 2, got {num_classes}")
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        kind = layer.get("type")
        if kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer["in_ch"]:
                raise ModelFormatError(f"layer {i} conv2d expects {layer['in_ch']} channels, got shape {shape}")
            k = layer["kernel"]
            shape = (layer["out_ch"], shape[1] - k + 1, shape[2] - k + 1)
            if min(shape[1:]) < 1:
                raise ModelFormatError(f"layer {i} conv2d kernel {k} too large")
        elif kind == "relu":
            pass
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1 or shape[0] != layer["in"]:
                raise ModelFormatError(f"layer {i} dense expects input {layer['in']}, got shape {shape}")
            shape = (layer["out"],)
        else:
            raise ModelFormatError(f"layer {i}: unknown layer type {kind!r}")
    if shape != (num_classes,):
        raise ModelFormatError(f"final output shape {shape} does not match num_classes={num_classes}")


def _f32(a: np.ndarray) -> np.ndarray:
    # parameters live on the float32 grid so the on-disk format is lossless
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class Model:
    layers: list[dict]
    num_classes: int
    input_shape: tuple
    parameters: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        validate_arch(self.layers, self.num_classes, self.input_shape)
        expected = [s for layer in self.layers for s in _param_shapes(layer)]
        if self.parameters and [p.shape for p in self.parameters] != expected:
            raise ModelFormatError(
                f"parameter shapes {[p.shape for p in self.parameters]} do not match layers {expected}")

    @classmethod
    def init(cls, layers, num_classes, input_shape, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        params = []
        for layer in layers:
            shapes = _param_shapes(layer)
            if not shapes:
                continue
            w_shape, b_shape = shapes
            fan_in = int(np.prod(w_shape[1:])) if layer["type"] == "conv2d" else w_shape[0]
            params.append(Tensor(_f32(rng.normal(0.0, np.sqrt(2.0 / fan_in), w_shape))))
            params.append(Tensor(np.zeros(b_shape)))
        return cls(list(layers), num_classes, input_shape, params)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"predict_logits: batch shape {x.shape} does not match input_shape {self.input_shape}")
        it = iter(self.parameters)
        for layer in self.layers:
            kind = layer["type"]
            if kind == "conv2d":
                w, b = next(it), next(it)
                x = ad.conv2d(x, w, b)
            elif kind == "relu":
                x = ad.relu(x)
            elif kind == "flatten":
                x = ad.reshape(x, (x.shape[0], -1))
            elif kind == "dense":
                w, b = next(it), next(it)
                x = ad.add(ad.matmul(x, w), b)
        return x

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Argmax labels; ties go to the lowest index (np.argmax semantics)."""
        return np.argmax(self.forward(x).data, axis=1)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters:
            p.requires_grad = flag
            p.grad = None

    def copy(self) -> "Model":
        return Model(list(self.layers), self.num_classes, self.input_shape,
                     [Tensor(p.data.copy()) for p in self.parameters])


def predict_logits(model: Model, batch) -> Tensor:
    return model.forward(batch)


@dataclass
class LabeledDataset:
    images: np.ndarray          # (n, C, H, W) in [0, 1]
    labels: np.ndarray          # (n,) int
    num_classes: int
    poisoned: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    hits = 0
    for i in range(0, len(labels), batch_size):
        hits += int((model.predict(images[i:i + batch_size]) == labels[i:i + batch_size]).sum())
    return hits / len(labels)


def train_model(
    dataset: LabeledDataset,
    arch: Optional[list[dict]],
    epochs: int,
    seed: int,
    *,
    learning_rate: float = 0.01,
    betas: tuple = (0.9, 0.999),
    batch_size: int = 32,
    label_smoothing: float = 0.0,
    penalty: Optional[Callable[[Tensor, np.ndarray], Tensor]] = None,
    augment: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
    history: Optional[list] = None,
) -> Model:
    """Train a classifier with minibatch Adam on mean cross-entropy.

    ``penalty(logits, batch_index)`` may add an extra scalar term to the loss
    of each batch; ``augment(images, rng)`` may perturb each batch. When
    ``history`` is given, the full-dataset loss before training and after
    each epoch is appended to it.
    """
    if len(dataset) == 0:
        raise ValueError("train_model: empty dataset")
    n_cls = dataset.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= n_cls:
        raise ValueError(f"train_model: labels must lie in [0, {n_cls})")
    c, h, w = dataset.images.shape[1:]
    arch = arch or default_arch(c, h, w, n_cls)
    model = Model.init(arch, n_cls, (c, h, w), seed)
    rng = np.random.default_rng([seed, 1])
    states = [ad.AdamState.for_variable(p, learning_rate=learning_rate, beta1=betas[0], beta2=betas[1])
              for p in model.parameters]
    if history is not None:
        history.append(dataset_loss(model, dataset, penalty))
    model.set_trainable(True)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = dataset.images[idx]
            if augment is not None:
                batch = augment(batch, rng)
            logits = model.forward(batch)
            loss = ad.softmax_cross_entropy(logits, dataset.labels[idx], label_smoothing)
            if penalty is not None:
                loss = ad.add(loss, penalty(logits, idx))
            ad.backward(loss)
            for p, st in zip(model.parameters, states):
                ad.adam_step(p, st)
        if history is not None:
            model.set_trainable(False)
            history.append(dataset_loss(model, dataset, penalty))
            model.set_trainable(True)
    model.set_trainable(False)
    for p in model.parameters:
        p.data = _f32(p.data)
    return model


def dataset_loss(model: Model, dataset: LabeledDataset, penalty=None) -> float:
    logits = model.forward(dataset.images)
    loss = ad.softmax_cross_entropy(logits, dataset.labels).item()
    if penalty is not None:
        loss += penalty(logits, np.arange(len(dataset))).item()
    return loss


# ---------------------------------------------------------------------------
# on-disk format:
#   magic "KARMMODL" | u32 version | u32 header length | UTF-8 JSON header
#   | float32 parameters, little-endian, layer order (weights then bias)


def save_model(model: Model, path) -> None:
    header = json.dumps({
        "layers": model.layers,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for p in model.parameters:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ModelFormatError(f"{path}: truncated file ({len(raw)} bytes, header needs 16)")
    if raw[:8] != MAGIC:
        bad = next(i for i in range(8) if raw[i] != MAGIC[i])
        raise ModelFormatError(f"{path}: bad magic byte at offset {bad}")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version} at offset 8, expected {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise ModelFormatError(f"{path}: truncated header at offset 16 (need {hlen} bytes)")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        layers, n_cls, in_shape = header["layers"], int(header["num_classes"]), tuple(header["input_shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header at offset 16: {exc}") from None
    validate_arch(layers, n_cls, in_shape)
    offset = 16 + hlen
    params = []
    for shape in (s for layer in layers for s in _param_shapes(layer)):
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise ModelFormatError(f"{path}: truncated parameters at offset {offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
        params.append(Tensor(arr.astype(np.float64).reshape(shape)))
        offset += nbytes
    if offset != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    return Model(layers, n_cls, in_shape, params)
