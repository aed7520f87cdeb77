"""Baseline CNN assembly, parameter accounting, and checkpoint files.

The network is five conv blocks (3x3 conv without bias, batch norm, ReLU,
2x spatial downsample) with filter counts 64m, 128m, 256m, 512m, 1024m,
followed by a bias-free 1x1 conv to 2048m with batch norm and identity
activation, global average pooling, and a dense layer with bias producing
one logit per class. Softmax is applied by callers that need probabilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import (
    BatchNorm2d,
    Conv2d,
    Dense,
    GlobalAvgPool,
    Identity,
    MaxPool2x2,
    Parameter,
    ReLU,
    softmax,
)

CHECKPOINT_MAGIC = b"BCLF"
CHECKPOINT_VERSION = 1

DOWNSAMPLE_MODES = ("maxpool", "strided_conv")


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncation, or otherwise unparseable bytes."""


class CheckpointVersionError(CheckpointError):
    """Recognized file with an unsupported version number."""


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not fit the requested model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 1500
    base_filters: int = 64
    filter_multiplier: float = 1.0
    downsample: str = "maxpool"
    groups: int = 1
    in_channels: int = 1
    input_rows: int = 128
    input_cols: int = 256

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ValueError(f"downsample must be one of {DOWNSAMPLE_MODES}")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        for f in self.stage_filters() + (self.embedding_filters(),):
            if f < 1:
                raise ValueError(f"filter multiplier yields non-positive count {f}")
        for f in self.stage_filters():
            if f % self.groups:
                raise ValueError(
                    f"stage filter count {f} not divisible by groups={self.groups}"
                )

    def stage_filters(self) -> tuple[int, ...]:
        """Output channels of the five 3x3 conv stages."""
        out = []
        for i in range(5):
            f = self.base_filters * (2**i) * self.filter_multiplier
            if abs(f - round(f)) > 1e-9:
                raise ValueError(f"non-integer filter count {f} at stage {i + 1}")
            out.append(int(round(f)))
        return tuple(out)

    def embedding_filters(self) -> int:
        """Output channels of the final 1x1 conv."""
        f = self.base_filters * 32 * self.filter_multiplier
        if abs(f - round(f)) > 1e-9:
            raise ValueError(f"non-integer filter count {f} for the 1x1 conv")
        return int(round(f))


class Model:
    """Layer chain plus metadata; forward produces logits."""

    def __init__(self, config: ModelConfig, layers: list, dense: Dense,
                 class_names: tuple[str, ...]):
        self.config = config
        self.layers = layers
        self.dense = dense
        self.class_names = class_names

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.params())
        out.extend(self.dense.params())
        return out

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return self.dense.forward(x, train=train)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.dense.backward(dlogits)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        """Infer-mode softmax probabilities for a batch."""
        return softmax(self.forward(x, train=False))

    def intermediate_shapes(self, x: np.ndarray) -> list[tuple[int, ...]]:
        """Per-layer output shapes (excluding batch dim) for one forward pass."""
        shapes = []
        for layer in self.layers:
            x = layer.forward(x, train=False)
            shapes.append(x.shape[1:])
        x = self.dense.forward(x, train=False)
        shapes.append(x.shape[1:])
        return shapes


def build_baseline(
    config: ModelConfig,
    class_names: tuple[str, ...] | None = None,
    seed: int = 0,
) -> Model:
    """Construct the baseline CNN with seeded He-normal initialization."""
    if class_names is None:
        class_names = tuple(f"class_{i:04d}" for i in range(config.n_classes))
    if len(class_names) != config.n_classes:
        raise ValueError("class_names length does not match n_classes")
    rng = np.random.Generator(np.random.PCG64(seed))
    strided = config.downsample == "strided_conv"
    layers: list = []
    in_ch = config.in_channels
    for i, f in enumerate(config.stage_filters(), start=1):
        # grouped convolutions need the group count to divide the input
        # channels too; the first stage sees 1 channel so it stays dense
        g = config.groups if in_ch % config.groups == 0 else 1
        layers.append(
            Conv2d(
                in_ch, f, kernel=3, stride=2 if strided else 1, groups=g,
                rng=rng, name=f"conv{i}",
            )
        )
        layers.append(BatchNorm2d(f, name=f"bn{i}"))
        layers.append(ReLU())
        if not strided:
            layers.append(MaxPool2x2())
        in_ch = f
    emb = config.embedding_filters()
    layers.append(Conv2d(in_ch, emb, kernel=1, rng=rng, name="conv6"))
    layers.append(BatchNorm2d(emb, name="bn6"))
    layers.append(Identity())
    layers.append(GlobalAvgPool())
    dense = Dense(emb, config.n_classes, rng=rng, name="dense")
    return Model(config, layers, dense, tuple(class_names))


def count_params(model: Model, trainable_only: bool = False) -> int:
    """Total stored tensor elements; running stats included unless excluded."""
    return sum(
        p.value.size for p in model.params() if p.trainable or not trainable_only
    )


def _config_blob(config: ModelConfig, epoch: int) -> str:
    lines = [
        f"n_classes = {config.n_classes}",
        f"base_filters = {config.base_filters}",
        f"filter_multiplier = {config.filter_multiplier!r}",
        f"downsample = {config.downsample}",
        f"groups = {config.groups}",
        f"in_channels = {config.in_channels}",
        f"input_rows = {config.input_rows}",
        f"input_cols = {config.input_cols}",
        f"epoch = {epoch}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_blob(text: str) -> tuple[ModelConfig, int]:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        config = ModelConfig(
            n_classes=int(kv["n_classes"]),
            base_filters=int(kv["base_filters"]),
            filter_multiplier=float(kv["filter_multiplier"]),
            downsample=kv["downsample"],
            groups=int(kv["groups"]),
            in_channels=int(kv["in_channels"]),
            input_rows=int(kv["input_rows"]),
            input_cols=int(kv["input_cols"]),
        )
        epoch = int(kv["epoch"])
    except KeyError as exc:
        raise CheckpointFormatError(f"config blob missing key {exc}") from exc
    except ValueError as exc:
        raise CheckpointFormatError(f"bad config blob value: {exc}") from exc
    return config, epoch


def save_checkpoint(model: Model, path: Path | str, epoch: int = 0) -> None:
    blob = _config_blob(model.config, epoch).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(model.class_names)))
    for name in model.class_names:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
    params = model.params()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        nb = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint file: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(
    path: Path | str, config: ModelConfig | None = None
) -> tuple[Model, int]:
    """Rebuild a model from a checkpoint file.

    When ``config`` is given the stored tensors must fit a model built from
    it (class count included); a mismatch raises CheckpointShapeError.
    Returns the model and the stored epoch index.
    """
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint file (bad magic): {path}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} in {path}"
        )
    stored_config, epoch = _parse_config_blob(r.string())
    n_names = r.u32()
    class_names = tuple(r.string() for _ in range(n_names))
    if len(class_names) != stored_config.n_classes:
        raise CheckpointFormatError(
            f"class list length {len(class_names)} != n_classes "
            f"{stored_config.n_classes} in {path}"
        )
    tensors: dict[str, np.ndarray] = {}
    n_tensors = r.u32()
    for _ in range(n_tensors):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"trailing bytes in checkpoint: {path}")

    if config is not None and len(class_names) != config.n_classes:
        raise CheckpointShapeError(
            f"checkpoint holds {len(class_names)} classes, "
            f"config expects {config.n_classes}"
        )
    target_config = stored_config if config is None else config
    model = build_baseline(target_config, class_names=None, seed=0)
    model.class_names = class_names
    params = {p.name: p for p in model.params()}
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointShapeError(
            f"tensor name mismatch in {path}: missing {missing}, extra {extra}"
        )
    for name, p in params.items():
        stored = tensors[name]
        if stored.shape != p.value.shape:
            raise CheckpointShapeError(
                f"tensor {name} has shape {stored.shape}, "
                f"model expects {p.value.shape}"
            )
        p.value = stored.astype(np.float32).copy()
    return model, epoch
