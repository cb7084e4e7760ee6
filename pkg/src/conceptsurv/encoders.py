"""Image encoders: per-concept CNNs, a shared embedding CNN and dense concept heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor

__all__ = [
    "ConceptSchema",
    "ConceptLogits",
    "Embedding",
    "EncoderConfig",
    "glorot",
    "init_cnn",
    "cnn_forward",
    "init_concept_encoder",
    "concept_encoder_forward",
    "init_embedding_encoder",
    "embedding_encoder_forward",
    "init_dense_heads",
    "dense_head_forward",
]


@dataclass(frozen=True)
class ConceptSchema:
    names: tuple
    cardinalities: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(k) for k in self.cardinalities))
        if len(self.names) < 1 or len(self.names) != len(self.cardinalities):
            raise ValueError("schema needs one cardinality per concept and at least one concept")
        if any(k < 2 for k in self.cardinalities):
            raise ValueError("every concept needs at least two values")

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def M(self) -> int:
        return sum(self.cardinalities)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.cardinalities)))

    def block(self, i: int) -> slice:
        o = self.offsets
        return slice(int(o[i]), int(o[i + 1]))

    def split(self, vector) -> list:
        """Split the last axis of ``vector`` into per-concept blocks."""
        return [vector[..., self.block(i)] for i in range(self.m)]

    def one_hot(self, concepts) -> np.ndarray:
        c = np.atleast_2d(np.asarray(concepts, dtype=np.int64))
        out = np.zeros((c.shape[0], self.M))
        for i in range(self.m):
            out[np.arange(c.shape[0]), self.offsets[i] + c[:, i]] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"names": list(self.names), "cardinalities": list(self.cardinalities)}

    @classmethod
    def from_dict(cls, d) -> "ConceptSchema":
        return cls(tuple(d["names"]), tuple(d["cardinalities"]))


@dataclass(frozen=True)
class ConceptLogits:
    """Concatenated per-concept logit blocks for one instance."""

    schema: ConceptSchema
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if v.size != self.schema.M:
            raise ValueError(f"expected {self.schema.M} logits, got {v.size}")
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_blocks(cls, schema: ConceptSchema, blocks: Sequence) -> "ConceptLogits":
        blocks = [np.asarray(b, dtype=np.float64).ravel() for b in blocks]
        if [b.size for b in blocks] != list(schema.cardinalities):
            raise ValueError("block lengths do not match schema cardinalities")
        return cls(schema, np.concatenate(blocks))

    @property
    def blocks(self) -> list:
        return self.schema.split(self.vector)

    def argmax(self) -> np.ndarray:
        return np.array([int(np.argmax(b)) for b in self.blocks])

    def probabilities(self) -> list:
        out = []
        for b in self.blocks:
            e = np.exp(b - b.max())
            out.append(e / e.sum())
        return out


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return int(np.asarray(self.vector).size)


@dataclass(frozen=True)
class EncoderConfig:
    """Convolutional stack followed by dense layers.

    ``convs`` holds ``(filters, kernel, stride)`` per layer; every conv is
    followed by ReLU and a ``pool`` x ``pool`` max-pool (``pool=1`` disables it).
    """

    input_shape: tuple = (56, 56, 1)
    convs: tuple = ((8, 3, 1), (16, 3, 1))
    pool: int = 2
    dense: tuple = (64,)
    output_dim: int = 10

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "convs", tuple(tuple(int(v) for v in c) for c in self.convs))
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (height, width, channels)")
        if self.output_dim < 1:
            raise ValueError("output_dim must be positive")
        self.feature_shape()  # raises when the stack does not fit

    def feature_shape(self) -> tuple:
        h, w, c = self.input_shape
        for filters, k, s in self.convs:
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if self.pool > 1:
                h, w = h // self.pool, w // self.pool
            if h < 1 or w < 1:
                raise ValueError(f"conv stack {self.convs} does not fit input {self.input_shape}")
            c = filters
        return h, w, c

    def with_output(self, output_dim: int) -> "EncoderConfig":
        return EncoderConfig(self.input_shape, self.convs, self.pool, self.dense, output_dim)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "convs": [list(c) for c in self.convs],
            "pool": self.pool,
            "dense": list(self.dense),
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        return cls(
            tuple(d["input_shape"]),
            tuple(tuple(c) for c in d["convs"]),
            int(d["pool"]),
            tuple(d["dense"]),
            int(d["output_dim"]),
        )


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_dense_stack(params, prefix, sizes, rng):
    for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}dense{i}.w", glorot(rng, (fin, fout), fin, fout))
        params.add(f"{prefix}dense{i}.b", np.zeros(fout))


def init_cnn(params: ParameterSet, prefix: str, config: EncoderConfig, rng) -> None:
    cin = config.input_shape[2]
    for i, (filters, k, _) in enumerate(config.convs):
        params.add(
            f"{prefix}conv{i}.w", glorot(rng, (k, k, cin, filters), k * k * cin, k * k * filters)
        )
        params.add(f"{prefix}conv{i}.b", np.zeros(filters))
        cin = filters
    h, w, c = config.feature_shape()
    _init_dense_stack(params, prefix, [h * w * c, *config.dense, config.output_dim], rng)


def _dense_stack(P, prefix, x, n_layers):
    for i in range(n_layers):
        x = ad.affine(x, P[f"{prefix}dense{i}.w"], P[f"{prefix}dense{i}.b"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def _conv_block(x, w, b, stride, pool):
    x = ad.relu(ad.conv2d(x, w, b, stride=stride))
    return ad.maxpool2d(x, pool) if pool > 1 else x


def _check_images(images, config: EncoderConfig) -> Tensor:
    x = ad.tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1, *x.shape))
    if x.ndim != 4 or tuple(x.shape[1:]) != config.input_shape:
        raise ad.ShapeError(
            f"encoder: image shape {tuple(x.shape[1:]) if x.ndim == 4 else x.shape} "
            f"does not match configured input {config.input_shape}"
        )
    return x


def cnn_forward(P, prefix: str, config: EncoderConfig, images, _from_layer: int = 0) -> Tensor:
    """Run one CNN on a batch of NHWC images; returns (batch, output_dim)."""
    x = _check_images(images, config) if _from_layer == 0 else images
    for i in range(_from_layer, len(config.convs)):
        x = _conv_block(x, P[f"{prefix}conv{i}.w"], P[f"{prefix}conv{i}.b"], config.convs[i][2], config.pool)
    x = ad.reshape(x, (x.shape[0], -1))
    return _dense_stack(P, prefix, x, len(config.dense) + 1)


def concept_prefix(i: int) -> str:
    return f"concept{i}."


def init_concept_encoder(params, schema: ConceptSchema, config: EncoderConfig, rng) -> None:
    """One independent CNN per concept; CNN ``i`` outputs ``k_i`` logits."""
    for i, k in enumerate(schema.cardinalities):
        init_cnn(params, concept_prefix(i), config.with_output(k), rng)


def concept_encoder_forward(P, images, schema: ConceptSchema, config: EncoderConfig) -> Tensor:
    """Concatenated concept logits, shape (batch, M).

    Every CNN sees the whole composite image. Their first conv layers share the
    input, so they are evaluated as one convolution over the stacked filters
    and split by channel afterwards; parameters remain per concept.
    """
    x = _check_images(images, config)
    if not config.convs:
        blocks = [cnn_forward(P, concept_prefix(i), config.with_output(k), x) for i, k in enumerate(schema.cardinalities)]
        return ad.concatenate(blocks, axis=1)
    m = schema.m
    w = ad.concatenate([P[f"{concept_prefix(i)}conv0.w"] for i in range(m)], axis=3)
    b = ad.concatenate([P[f"{concept_prefix(i)}conv0.b"] for i in range(m)], axis=0)
    f = config.convs[0][0]
    stacked = _conv_block(x, w, b, config.convs[0][2], config.pool)
    blocks = []
    for i, k in enumerate(schema.cardinalities):
        xi = stacked[:, :, :, i * f : (i + 1) * f]
        blocks.append(cnn_forward(P, concept_prefix(i), config.with_output(k), xi, _from_layer=1))
    return ad.concatenate(blocks, axis=1)


def init_embedding_encoder(params, config: EncoderConfig, d: int, rng) -> None:
    init_cnn(params, "embed.", config.with_output(d), rng)


def embedding_encoder_forward(P, images, d: int, config: EncoderConfig) -> Tensor:
    """Shared CNN producing embeddings of dimension ``d``, shape (batch, d)."""
    return cnn_forward(P, "embed.", config.with_output(d), images)


def init_dense_heads(params, d: int, schema: ConceptSchema, hidden: Sequence[int], rng) -> None:
    for i, k in enumerate(schema.cardinalities):
        _init_dense_stack(params, f"head{i}.", [d, *hidden, k], rng)


def dense_head_forward(P, z, schema: ConceptSchema, hidden: Sequence[int] = (32,)) -> Tensor:
    """One dense network per concept on the embedding; concatenated logits (batch, M)."""
    z = ad.tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    d = P["head0.dense0.w"].shape[0]
    if z.shape[1] != d:
        raise ad.ShapeError(f"dense_head: embedding dimension {z.shape[1]} does not match {d}")
    blocks = [_dense_stack(P, f"head{i}.", z, len(hidden) + 1) for i in range(schema.m)]
    return ad.concatenate(blocks, axis=1)
