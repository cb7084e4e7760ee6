"""Composite-image concept survival datasets.

Source images come from an IDX file pair (MNIST layout) or from a procedural
glyph pool that needs no download. Four source images are tiled into a 2x2
composite; the tiles define the concepts, the concepts drive a Weibull (or
sin-distorted Weibull) event time, and Bernoulli flags mark censoring.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import ConceptSchema
from .survival import EventSample

__all__ = [
    "IDXFormatError",
    "SourcePool",
    "GenerationConfig",
    "ConceptSurvivalDataset",
    "CIFAR10_CLASSES",
    "CIFAR10_TAGS",
    "read_idx",
    "write_idx",
    "load_idx_pool",
    "synth_glyph_pool",
    "synth_tagged_pool",
    "compose_mnist_style",
    "compose_cifar_style",
    "block_coefficients",
    "generate_event_times",
    "apply_censoring",
    "build_dataset",
]

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CIFAR10_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)
_ANIMALS = {"bird", "cat", "deer", "dog", "frog", "horse"}
_VEHICLES = {"airplane", "automobile", "ship", "truck"}
_FLYING = {"airplane", "bird"}
CIFAR10_TAGS = {
    i: {
        "animal": name in _ANIMALS,
        "vehicle": name in _VEHICLES,
        "flying": name in _FLYING,
        "cat": name == "cat",
    }
    for i, name in enumerate(CIFAR10_CLASSES)
}
TAG_KEYS = ("animal", "vehicle", "flying", "cat")


class IDXFormatError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class SourcePool:
    images: np.ndarray
    labels: np.ndarray
    n_categories: int
    tags: dict | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"pool has {len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_categories):
            raise ValueError(f"labels must lie in [0, {self.n_categories})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def by_category(self) -> list:
        return [np.flatnonzero(self.labels == c) for c in range(self.n_categories)]


# -- IDX ingestion ---------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise IDXFormatError(f"{path}: unsupported IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IDXFormatError(f"{path}: truncated header at byte offset {len(raw)}, expected {end}")
    shape = struct.unpack(f">{ndim}I", raw[4:end])
    size = int(np.prod(shape))
    if len(raw) < end + size:
        raise IDXFormatError(
            f"{path}: truncated data at byte offset {len(raw)}, expected {end + size} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=end).reshape(shape)


def write_idx(path, array) -> None:
    """Write a uint8 array as an IDX file (magic 0x0000_08_<ndim>)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def _check_magic(path, expected):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise IDXFormatError(f"{path}: truncated header at byte offset {len(head)}")
    found = struct.unpack(">I", head)[0]
    if found != expected:
        raise IDXFormatError(f"{path}: bad magic number, expected {expected}, found {found}")


def load_idx_pool(images_path, labels_path) -> SourcePool:
    """Load an MNIST-layout image/label IDX pair, scaling pixels to [0, 1]."""
    _check_magic(images_path, IDX_IMAGES_MAGIC)
    _check_magic(labels_path, IDX_LABELS_MAGIC)
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n_cat = int(labels.max()) + 1 if labels.size else 0
    return SourcePool(images[..., None] / 255.0, labels, max(n_cat, 10))


# -- procedural glyphs -----------------------------------------------------

# seven-segment strokes plus two diagonals, in a 28x28 frame: (x0, y0, x1, y1)
_STROKES = (
    (9, 5, 19, 5),  # top
    (19, 5, 19, 14),  # upper right
    (19, 14, 19, 23),  # lower right
    (9, 23, 19, 23),  # bottom
    (9, 14, 9, 23),  # lower left
    (9, 5, 9, 14),  # upper left
    (9, 14, 19, 14),  # middle
    (9, 5, 19, 23),  # diagonal down
    (9, 23, 19, 5),  # diagonal up
)
_DIGITS = (
    (0, 1, 2, 3, 4, 5),
    (1, 2),
    (0, 1, 6, 4, 3),
    (0, 1, 6, 2, 3),
    (5, 6, 1, 2),
    (0, 5, 6, 2, 3),
    (0, 5, 4, 3, 2, 6),
    (0, 1, 2),
    (0, 1, 2, 3, 4, 5, 6),
    (0, 1, 2, 3, 5, 6),
)


def _glyph_codes(categories: int) -> list:
    codes = [frozenset(d) for d in _DIGITS[:categories]]
    # further categories: distinct stroke subsets in a fixed enumeration
    mask = 1
    while len(codes) < categories:
        mask += 1
        code = frozenset(i for i in range(len(_STROKES)) if mask >> i & 1)
        if len(code) >= 2 and code not in codes:
            codes.append(code)
    return codes


def _draw(code, size, shift, thickness, rng):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = np.zeros((size, size))
    scale = size / 28.0
    for s in code:
        x0, y0, x1, y1 = (np.array(_STROKES[s], dtype=float) + np.r_[shift, shift]) * scale
        x0, x1 = x0 + rng.normal(0, 0.4), x1 + rng.normal(0, 0.4)
        y0, y1 = y0 + rng.normal(0, 0.4), y1 + rng.normal(0, 0.4)
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0, 1)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        img = np.maximum(img, np.clip(thickness * scale - dist, 0, 1))
    return img


def synth_glyph_pool(
    categories: int = 10,
    per_category: int = 100,
    seed=0,
    size: int = 28,
    channels: int = 1,
    noise: float = 0.1,
) -> SourcePool:
    """Procedural stand-in for MNIST.

    Category ``c < 10`` is the seven-segment rendering of digit ``c``; further
    categories use other stroke subsets. Each image gets a random shift,
    stroke jitter and thickness, and Gaussian pixel noise.
    """
    if categories < 2:
        raise ValueError("need at least two categories")
    rng = _rng(seed)
    codes = _glyph_codes(categories)
    palette = rng.uniform(0.3, 1.0, size=(categories, channels)) if channels > 1 else None
    images = np.empty((categories * per_category, size, size, channels))
    labels = np.repeat(np.arange(categories), per_category)
    for k, c in enumerate(labels):
        shift = rng.integers(-3, 4, size=2).astype(float)
        img = _draw(codes[c], size, shift, rng.uniform(1.5, 2.5), rng) * rng.uniform(0.7, 1.0)
        img = img[..., None] * (palette[c] if palette is not None else 1.0)
        images[k] = np.clip(img + rng.normal(0, noise, img.shape), 0, 1)
    return SourcePool(images, labels, categories)


def synth_tagged_pool(per_category: int = 100, seed=0, size: int = 32) -> SourcePool:
    """Colour glyph pool with the ten CIFAR-10 classes and their attribute tags."""
    pool = synth_glyph_pool(10, per_category, seed, size=size, channels=3)
    pool.tags = dict(CIFAR10_TAGS)
    return pool


# -- composition ------------------------------------------------------------


def _tile(tiles):
    top = np.concatenate([tiles[0], tiles[1]], axis=1)
    bottom = np.concatenate([tiles[2], tiles[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def compose_mnist_style(pool: SourcePool, n: int, seed=0):
    """Tile four images of pairwise-distinct categories; concept ``i`` is tile ``i``'s category.

    Tiles are ordered top-left, top-right, bottom-left, bottom-right.
    Returns ``(images, concepts, schema)``.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if pool.n_categories < 4:
        raise ValueError("pool needs at least four categories")
    members = pool.by_category()
    present = [c for c in range(pool.n_categories) if members[c].size]
    if len(present) < 4:
        raise ValueError("pool needs images from at least four categories")
    rng = _rng(seed)
    h, w, ch = pool.image_shape
    images = np.empty((n, 2 * h, 2 * w, ch))
    concepts = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        while True:
            cats = rng.choice(present, size=4)
            if len(set(cats.tolist())) == 4:
                break
        picks = [members[c][rng.integers(members[c].size)] for c in cats]
        images[k] = _tile([pool.images[p] for p in picks])
        concepts[k] = cats
    schema = ConceptSchema(("tile1", "tile2", "tile3", "tile4"), (pool.n_categories,) * 4)
    return images, concepts, schema


def compose_cifar_style(pool: SourcePool, n: int, seed=0):
    """Tile four random images; concepts count animals, vehicles and flying objects, plus cat presence."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not pool.tags:
        raise ValueError("pool has no attribute tags")
    for c in range(pool.n_categories):
        missing = [k for k in TAG_KEYS if k not in pool.tags.get(c, {})]
        if missing:
            raise ValueError(f"category {c} is missing attribute tags {missing}")
    attr = np.array([[bool(pool.tags[c][k]) for k in TAG_KEYS] for c in range(pool.n_categories)])
    rng = _rng(seed)
    h, w, ch = pool.image_shape
    images = np.empty((n, 2 * h, 2 * w, ch))
    concepts = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        picks = rng.integers(len(pool), size=4)
        images[k] = _tile([pool.images[p] for p in picks])
        counts = attr[pool.labels[picks]].sum(axis=0)
        concepts[k] = (counts[0], counts[1], counts[2], int(counts[3] > 0))
    schema = ConceptSchema(("animals", "vehicles", "flying", "cat"), (5, 5, 5, 2))
    return images, concepts, schema


# -- event times and censoring -----------------------------------------------


def block_coefficients(schema: ConceptSchema, block_values: Sequence[float], mode: str = "constant"):
    """Coefficient vector of length M for one-hot concept encoding.

    ``constant`` repeats ``v_i`` across concept ``i``'s block. Because a one-hot
    block has exactly one active entry, this adds the same ``v_i`` to every
    instance. ``ramp`` uses ``v_i * j`` for value ``j``; it matches integer
    encoding with coefficients ``v``, so ``|v_i|`` orders concept importance.
    """
    if len(block_values) != schema.m:
        raise ValueError(f"need {schema.m} block values, got {len(block_values)}")
    blocks = []
    for v, k in zip(block_values, schema.cardinalities):
        if mode == "constant":
            blocks.append(np.full(k, float(v)))
        elif mode == "ramp":
            blocks.append(float(v) * np.arange(k))
        else:
            raise ValueError(f"unknown block mode {mode!r}")
    return tuple(np.concatenate(blocks).tolist())


@dataclass(frozen=True)
class GenerationConfig:
    """Parameters of the event-time law and censoring.

    ``b`` has one entry per concept for ``integer`` encoding and ``M`` entries
    for ``one-hot`` encoding.
    """

    b: tuple = (0.5, 1.5, -1.0, 0.001)
    nu: float = 2.0
    lam: float = 1e-4
    law: str = "weibull"
    encoding: str = "integer"
    rho: float = 0.33
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        if self.law not in ("weibull", "weibull-sin"):
            raise ValueError(f"unknown time law {self.law!r}")
        if self.encoding not in ("integer", "one-hot"):
            raise ValueError(f"unknown concept encoding {self.encoding!r}")
        if not (self.nu > 0 and self.lam > 0):
            raise ValueError("nu and lam must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")

    @classmethod
    def mnist(cls, **kw) -> "GenerationConfig":
        return cls(**{"b": (0.5, 1.5, -1.0, 0.001), "nu": 2.0, "lam": 1e-4, **kw})

    @classmethod
    def mnist_sin(cls, **kw) -> "GenerationConfig":
        return cls(**{"b": (0.5, 1.5, -1.0, 0.001), "nu": 4.0, "lam": 0.01, "law": "weibull-sin", **kw})

    @classmethod
    def cifar(cls, **kw) -> "GenerationConfig":
        return cls(**{"b": (-0.7, 1.5, -2.0, 5.0), "nu": 2.0, "lam": 0.01, **kw})

    @classmethod
    def mnist_blocks(cls, mode: str = "ramp", categories: int = 10, **kw) -> "GenerationConfig":
        schema = ConceptSchema(("tile1", "tile2", "tile3", "tile4"), (categories,) * 4)
        b = block_coefficients(schema, (0.5, 1.5, 1e-4, 1e-3), mode)
        return cls(**{"b": b, "nu": 2.0, "lam": 1e-4, "encoding": "one-hot", **kw})

    @classmethod
    def cifar_blocks(cls, mode: str = "ramp", **kw) -> "GenerationConfig":
        schema = ConceptSchema(("animals", "vehicles", "flying", "cat"), (5, 5, 5, 2))
        b = block_coefficients(schema, (1e-3, 1e-4, 3.0, 5.0), mode)
        return cls(**{"b": b, "nu": 4.0, "lam": 1e-3, "encoding": "one-hot", **kw})

    def to_dict(self) -> dict:
        return {
            "b": list(self.b),
            "nu": self.nu,
            "lam": self.lam,
            "law": self.law,
            "encoding": self.encoding,
            "rho": self.rho,
            "seed": self.seed,
        }


def _linear_predictor(concepts, config: GenerationConfig, schema):
    c = np.atleast_2d(np.asarray(concepts))
    b = np.asarray(config.b)
    if config.encoding == "one-hot":
        if schema is None:
            raise ValueError("one-hot encoding needs the concept schema")
        x = schema.one_hot(c)
    else:
        x = c.astype(np.float64)
    if x.shape[1] != b.size:
        raise ValueError(
            f"coefficient vector has {b.size} entries but {config.encoding} concepts have {x.shape[1]}"
        )
    return x @ b


def _uniform_open(rng, n):
    u = rng.random(n)
    while np.any(u == 0.0):
        zero = u == 0.0
        u[zero] = rng.random(int(zero.sum()))
    return u


def generate_event_times(concepts, config: GenerationConfig, schema=None, seed=None, u=None):
    """Inverse-transform sampling of event times.

    ``weibull``: ``T = (-ln u / (lam * exp(b.c)))**(1/nu)``;
    ``weibull-sin``: ``exp(b.c)`` is replaced by ``sin(b.c) + 1.001``.
    ``u`` may be passed explicitly; otherwise it is drawn from ``seed``
    (default ``config.seed``) with exact zeros redrawn.
    """
    eta = _linear_predictor(concepts, config, schema)
    if u is None:
        u = _uniform_open(_rng(config.seed if seed is None else seed), eta.size)
    u = np.asarray(u, dtype=np.float64)
    scale = np.exp(eta) if config.law == "weibull" else np.sin(eta) + 1.001
    return (-np.log(u) / (config.lam * scale)) ** (1.0 / config.nu)


def apply_censoring(times, rho: float, seed=0) -> np.ndarray:
    """Independent Bernoulli(rho) event flags; the recorded times are left unchanged."""
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    n = len(times)
    return _rng(seed).random(n) < rho


# -- dataset -----------------------------------------------------------------


@dataclass
class ConceptSurvivalDataset:
    images: np.ndarray
    concepts: np.ndarray
    times: np.ndarray
    events: np.ndarray
    schema: ConceptSchema

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.concepts = np.asarray(self.concepts, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=bool)
        n = len(self.images)
        if not (len(self.concepts) == len(self.times) == len(self.events) == n):
            raise ValueError("dataset fields are not aligned")
        if self.concepts.ndim != 2 or self.concepts.shape[1] != self.schema.m:
            raise ValueError(f"concepts must have shape (n, {self.schema.m})")
        if np.any(self.concepts >= np.asarray(self.schema.cardinalities)) or np.any(self.concepts < 0):
            raise ValueError("concept values outside schema cardinalities")
        if np.any(self.times < 0):
            raise ValueError("times must be non-negative")

    def __len__(self):
        return len(self.times)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def samples(self) -> list:
        return [EventSample(float(t), bool(d)) for t, d in zip(self.times, self.events)]

    def subset(self, idx) -> "ConceptSurvivalDataset":
        idx = np.asarray(idx)
        return ConceptSurvivalDataset(
            self.images[idx], self.concepts[idx], self.times[idx], self.events[idx], self.schema
        )

    def train_test_split(self, test_fraction: float = 0.4, seed=0):
        """Random split; the test part holds ``round(test_fraction * n)`` instances."""
        if not 0 < test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        perm = _rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            images=self.images,
            concepts=self.concepts,
            times=self.times,
            events=self.events,
            schema_names=np.array(self.schema.names),
            schema_cardinalities=np.array(self.schema.cardinalities),
        )

    @classmethod
    def load(cls, path) -> "ConceptSurvivalDataset":
        with np.load(path) as z:
            schema = ConceptSchema(tuple(z["schema_names"].tolist()), tuple(z["schema_cardinalities"].tolist()))
            return cls(z["images"], z["concepts"], z["times"], z["events"], schema)


DATASET_KINDS = ("mnist", "mnist-sin", "mnist-blocks", "cifar-style")


def default_generation(kind: str, **kw) -> GenerationConfig:
    if kind == "mnist":
        return GenerationConfig.mnist(**kw)
    if kind == "mnist-sin":
        return GenerationConfig.mnist_sin(**kw)
    if kind == "mnist-blocks":
        return GenerationConfig.mnist_blocks(**kw)
    if kind == "cifar-style":
        return GenerationConfig.cifar(**kw)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")


def build_dataset(kind: str, pool: SourcePool, n: int, config: GenerationConfig | None = None):
    """Compose images, then draw times and censoring flags from ``config``.

    ``kind`` picks the composition (``mnist``/``mnist-sin`` tile distinct
    categories, ``cifar-style`` counts tagged attributes) and, when ``config``
    is None, the generation preset.
    """
    if config is None:
        config = default_generation(kind)
    ss = np.random.SeedSequence(config.seed)
    compose_seed, time_seed, censor_seed = (np.random.default_rng(s) for s in ss.spawn(3))
    if kind in ("mnist", "mnist-sin", "mnist-blocks"):
        images, concepts, schema = compose_mnist_style(pool, n, compose_seed)
    elif kind == "cifar-style":
        images, concepts, schema = compose_cifar_style(pool, n, compose_seed)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")
    times = generate_event_times(concepts, config, schema, seed=time_seed)
    events = apply_censoring(times, config.rho, censor_seed)
    return ConceptSurvivalDataset(images, concepts, times, events, schema)
