"""SurvCBM, SurvRCM and SurvBase with Cox or Beran survival heads.

* ``survcbm``: one CNN per concept; the survival head sees only the
  concatenated concept logits.
* ``survrcm``: a shared CNN embedding feeds the survival head, and dense
  concept heads on the same embedding act as a regulariser.
* ``survbase``: the shared CNN embedding and survival head, trained without
  concepts.

All three are trained end to end on ``-alpha * smoothed C-index + (1 - alpha)
* concept cross-entropy`` (``survbase`` drops the second term).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .datagen import ConceptSurvivalDataset
from .encoders import (
    ConceptLogits,
    ConceptSchema,
    EncoderConfig,
    concept_encoder_forward,
    dense_head_forward,
    embedding_encoder_forward,
    init_concept_encoder,
    init_dense_heads,
    init_embedding_encoder,
)
from .losses import comparable_pairs, concept_cross_entropy, smoothed_c_index, total_loss
from .survival import (
    DENOM_FLOOR,
    StepSurvivalFunction,
    _sort_order,
    beran_survival_matrix,
    concordance_index,
    cox_survival_matrix,
    expected_times,
    nelson_aalen,
)

log = logging.getLogger(__name__)

__all__ = [
    "ARCHITECTURES",
    "SurvivalHeadSpec",
    "ModelSpec",
    "TrainConfig",
    "TrainedModel",
    "PredictionBundle",
    "Metrics",
    "init_params",
    "make_loss_program",
    "fit",
    "predict",
    "predict_batch",
    "predict_arrays",
    "evaluate",
    "macro_f1",
]

ARCHITECTURES = ("survcbm", "survrcm", "survbase")
HEADS = ("cox", "beran")


@dataclass(frozen=True)
class SurvivalHeadSpec:
    """Cox (linear risk on the head input) or Beran (kernel over a background set).

    For Beran, ``bandwidth='scalar'`` uses the fixed hyperparameter ``tau``;
    ``'per_value'`` learns one bandwidth per concept value, starting at ``tau``.
    """

    kind: str = "cox"
    background_size: int = 128
    bandwidth: str = "scalar"
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in HEADS:
            raise ValueError(f"unknown head {self.kind!r}; expected one of {HEADS}")
        if self.bandwidth not in ("scalar", "per_value"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth!r}")
        if self.kind == "beran" and self.background_size < 2:
            raise ValueError("Beran background needs at least two instances")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    head: SurvivalHeadSpec = field(default_factory=SurvivalHeadSpec)
    schema: ConceptSchema | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embedding_dim: int = 32
    concept_hidden: tuple = (32,)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.architecture == "survbase":
            object.__setattr__(self, "schema", None)
        elif self.schema is None:
            raise ValueError(f"{self.architecture} needs a concept schema")
        object.__setattr__(self, "concept_hidden", tuple(int(h) for h in self.concept_hidden))
        if self.head.bandwidth == "per_value" and self.architecture != "survcbm":
            raise ValueError("per-value bandwidths need concept logits as head input (survcbm)")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")

    @property
    def head_width(self) -> int:
        return self.schema.M if self.architecture == "survcbm" else self.embedding_dim

    @property
    def uses_concepts(self) -> bool:
        return self.architecture != "survbase"

    @property
    def name(self) -> str:
        return f"{self.architecture}-{self.head.kind}"

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "head": asdict(self.head),
            "schema": None if self.schema is None else self.schema.to_dict(),
            "encoder": self.encoder.to_dict(),
            "embedding_dim": self.embedding_dim,
            "concept_hidden": list(self.concept_hidden),
        }

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(
            d["architecture"],
            SurvivalHeadSpec(**d["head"]),
            None if d["schema"] is None else ConceptSchema.from_dict(d["schema"]),
            EncoderConfig.from_dict(d["encoder"]),
            int(d["embedding_dim"]),
            tuple(d["concept_hidden"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``tasks_per_epoch`` is the number of (batch, background) draws per epoch;
    None covers the training set once. ``beran_time_scale='median'`` divides
    Beran expected times by the median training time before the smoothed
    C-index, which makes ``omega`` unit-free for both heads.
    """

    alpha: float = 0.5
    omega: float = 1.0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    tasks_per_epoch: int | None = None
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    final_background_size: int | None = None
    beran_time_scale: str = "median"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.omega > 0 or not self.lr > 0:
            raise ValueError("omega and lr must be positive")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.tasks_per_epoch is not None and self.tasks_per_epoch < 1:
            raise ValueError("tasks_per_epoch must be positive")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.beran_time_scale not in ("median", "none"):
            raise ValueError(f"unknown beran_time_scale {self.beran_time_scale!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BeranBackground:
    features: np.ndarray
    times: np.ndarray
    events: np.ndarray
    indices: np.ndarray


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: ParameterSet
    baseline: StepSurvivalFunction | None = None
    background: BeranBackground | None = None
    history: list = field(default_factory=list)
    config: TrainConfig | None = None
    risk_offset: float = 0.0

    def __post_init__(self):
        if (self.baseline is not None) != (self.spec.head.kind == "cox"):
            raise ValueError("a Cox model needs a baseline and a Beran model must not have one")
        if (self.background is not None) != (self.spec.head.kind == "beran"):
            raise ValueError("a Beran model needs a background and a Cox model must not have one")


@dataclass
class PredictionBundle:
    sf: StepSurvivalFunction
    expected_time: float
    concept_logits: ConceptLogits | None = None
    concept_argmax: np.ndarray | None = None


@dataclass
class Metrics:
    c_index: float
    f1_per_concept: list
    f1_mean: float | None


# -- parameters and forward passes --------------------------------------------


def init_params(spec: ModelSpec, rng) -> ParameterSet:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params = ParameterSet()
    if spec.architecture == "survcbm":
        init_concept_encoder(params, spec.schema, spec.encoder, rng)
    else:
        init_embedding_encoder(params, spec.encoder, spec.embedding_dim, rng)
        if spec.architecture == "survrcm":
            init_dense_heads(params, spec.embedding_dim, spec.schema, spec.concept_hidden, rng)
    width = spec.head_width
    if spec.head.kind == "cox":
        params.add("cox.b", np.zeros(width))
    elif spec.head.bandwidth == "per_value":
        params.add("beran.log_tau", np.full(width, math.log(spec.head.tau)))
    else:
        params.add("beran.log_tau", np.array([math.log(spec.head.tau)]), trainable=False)
    return params


def _forward(P, spec: ModelSpec, images):
    """Return (head input, concept logits or None), both (batch, .)."""
    if spec.architecture == "survcbm":
        logits = concept_encoder_forward(P, images, spec.schema, spec.encoder)
        return logits, logits
    z = embedding_encoder_forward(P, images, spec.embedding_dim, spec.encoder)
    if spec.architecture == "survrcm":
        return z, dense_head_forward(P, z, spec.schema, spec.concept_hidden)
    return z, None


def _inverse_bandwidth(P, spec: ModelSpec) -> Tensor:
    inv = ad.exp(-P["beran.log_tau"])
    if spec.head.bandwidth == "scalar":
        inv = inv * np.ones(spec.head_width)
    return inv


def beran_expected_time(weights, times, events) -> Tensor:
    """Differentiable rectangle-rule mean of the Beran estimate, one per weight row."""
    order = _sort_order(np.asarray(times, dtype=float), np.asarray(events, dtype=bool))
    t = np.asarray(times, dtype=float)[order]
    d = np.asarray(events, dtype=float)[order]
    w = ad.take(weights, (slice(None), order))
    # remaining mass as a reverse cumulative sum avoids cancellation in 1 - spent
    rev = (slice(None), slice(None, None, -1))
    remaining = ad.take(ad.cumsum(ad.take(w, rev), axis=1), rev)
    factor = 1.0 - w / ad.clamp_min(remaining, DENOM_FLOOR)
    log_surv = ad.cumsum(ad.log(ad.clamp_min(factor, 1e-300)) * d, axis=1)
    surv = ad.exp(log_surv)
    return ad.matmul(surv[:, :-1], np.diff(t)) + t[0]


def make_loss_program(spec: ModelSpec, config: TrainConfig, batch: ConceptSurvivalDataset,
                      background: ConceptSurvivalDataset | None = None, time_scale: float = 1.0):
    """Build ``program(P) -> (loss, l_surv or None, l_ce or None)`` for one task.

    The survival term is dropped, with a warning, when the batch has no
    comparable pair.
    """
    if spec.head.kind == "beran" and background is None:
        raise ValueError("a Beran head needs a background set")
    has_pairs = comparable_pairs(batch.times, batch.events).any()
    nq = len(batch)

    def program(P):
        if spec.head.kind == "beran":
            images = np.concatenate([batch.images, background.images])
        else:
            images = batch.images
        head_in, logits = _forward(P, spec, images)
        l_surv = l_ce = None
        if has_pairs:
            if spec.head.kind == "cox":
                pred = -ad.matmul(head_in, P["cox.b"])
            else:
                q, bg = head_in[:nq], head_in[nq:]
                dist = ad.sq_distance(q, bg, _inverse_bandwidth(P, spec))
                weights = ad.softmax(-dist, axis=1)
                pred = beran_expected_time(weights, background.times, background.events)
                pred = pred * (1.0 / time_scale)
            l_surv = smoothed_c_index(pred, batch.times, batch.events, config.omega)
        if spec.uses_concepts:
            l_ce = concept_cross_entropy(logits[:nq], batch.concepts, spec.schema)
        if spec.uses_concepts and l_surv is not None:
            loss = total_loss(l_surv, l_ce, config.alpha)
        elif l_surv is not None:
            loss = -l_surv
        elif l_ce is not None:
            loss = l_ce * (1.0 - config.alpha)
        else:
            loss = ad.Tensor(0.0)
        return loss, l_surv, l_ce

    program.has_pairs = has_pairs
    return program


# -- optimisation --------------------------------------------------------------


class _Optimizer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.state = {}
        self.t = 0

    def step(self, params: ParameterSet, grads: dict) -> None:
        c = self.config
        self.t += 1
        for name, g in grads.items():
            p = params.arrays[name]
            if c.weight_decay:
                g = g + c.weight_decay * p
            if c.optimizer == "momentum":
                v = self.state.get(name)
                v = g if v is None else c.momentum * v + g
                self.state[name] = v
                p -= c.lr * v
            else:
                m, s = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = 0.9 * m + 0.1 * g
                s = 0.999 * s + 0.001 * g * g
                self.state[name] = (m, s)
                mhat = m / (1 - 0.9**self.t)
                shat = s / (1 - 0.999**self.t)
                p -= c.lr * mhat / (np.sqrt(shat) + 1e-8)


def _batches(rng, n, batch_size, count):
    """``count`` batches of distinct indices drawn from a stream of permutations."""
    pool = rng.permutation(n)
    for _ in range(count):
        if pool.size < batch_size:
            fresh = rng.permutation(n)
            pool = np.concatenate([pool, fresh[~np.isin(fresh, pool)]])
        batch, pool = pool[:batch_size], pool[batch_size:]
        yield np.sort(batch)


def fit(spec: ModelSpec, train: ConceptSurvivalDataset, config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Train end to end with mini-batch gradient steps; seeded and deterministic."""
    n = len(train)
    if n == 0:
        raise ValueError("empty dataset")
    if spec.uses_concepts and train.schema != spec.schema:
        raise ValueError("dataset schema does not match the model schema")
    if tuple(train.image_shape) != spec.encoder.input_shape:
        raise ValueError(f"dataset images {train.image_shape} do not match encoder input {spec.encoder.input_shape}")
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)
    opt = _Optimizer(config)
    beran = spec.head.kind == "beran"
    batch_size = min(config.batch_size, n - 2 if beran else n)
    if batch_size < 2:
        raise ValueError("training set too small")
    tasks = config.tasks_per_epoch or math.ceil(n / batch_size)
    time_scale = 1.0
    if beran and config.beran_time_scale == "median":
        time_scale = float(np.median(train.times)) or 1.0
    history = []
    for epoch in range(config.epochs):
        losses, survs, ces, skipped = [], [], [], 0
        for idx in _batches(rng, n, batch_size, tasks):
            background = None
            if beran:
                rest = np.setdiff1d(np.arange(n), idx)
                size = min(spec.head.background_size, rest.size)
                background = train.subset(np.sort(rng.choice(rest, size, replace=False)))
            program = make_loss_program(spec, config, train.subset(idx), background, time_scale)
            if not program.has_pairs:
                skipped += 1
                log.warning("epoch %d: batch without comparable pairs, survival term skipped", epoch)
                if not spec.uses_concepts:
                    continue
            (loss, l_surv, l_ce), grads = ad.forward_backward(lambda P: program(P), params)
            opt.step(params, grads)
            losses.append(float(loss))
            if l_surv is not None:
                survs.append(float(l_surv))
            if l_ce is not None:
                ces.append(float(l_ce))
        if skipped == tasks:
            raise ValueError(f"epoch {epoch}: no batch had comparable pairs")
        history.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "l_surv": float(np.mean(survs)) if survs else float("nan"),
                "l_ce": float(np.mean(ces)) if ces else float("nan"),
                "skipped": skipped,
            }
        )
    baseline = background = None
    risk_offset = 0.0
    if spec.head.kind == "cox":
        baseline = nelson_aalen(train.times, train.events).to_survival()
        # the marginal baseline describes an average instance, so centre the risk
        feats, _ = _features(params, spec, train.images)
        risk_offset = float(np.mean(feats @ params["cox.b"]))
    else:
        size = min(config.final_background_size or spec.head.background_size, n)
        idx = np.sort(rng.choice(n, size, replace=False))
        feats, _ = _features(params, spec, train.images[idx])
        background = BeranBackground(feats, train.times[idx].copy(), train.events[idx].copy(), idx)
    return TrainedModel(spec, params, baseline, background, history, config, risk_offset)


# -- prediction -----------------------------------------------------------------


def _features(params: ParameterSet, spec: ModelSpec, images, chunk: int = 256):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    P = params.tensors(grad=False)
    heads, logits = [], []
    for start in range(0, len(images), chunk):
        h, lg = _forward(P, spec, images[start : start + chunk])
        heads.append(h.data)
        if lg is not None:
            logits.append(lg.data)
    width = spec.head_width
    head = np.concatenate(heads) if heads else np.zeros((0, width))
    return head, (np.concatenate(logits) if logits else None)


def _beran_weights(model: TrainedModel, head: np.ndarray, chunk: int = 128) -> np.ndarray:
    bg = model.background.features
    inv = np.exp(-model.params["beran.log_tau"])
    inv = np.broadcast_to(inv, (bg.shape[1],))
    out = np.empty((head.shape[0], bg.shape[0]))
    for s in range(0, head.shape[0], chunk):
        q = head[s : s + chunk]
        d = (((q[:, None, :] - bg[None, :, :]) ** 2) * inv).sum(axis=2)
        d = d - d.min(axis=1, keepdims=True)
        e = np.exp(-d)
        out[s : s + chunk] = e / e.sum(axis=1, keepdims=True)
    return out


def predict_arrays(model: TrainedModel, images):
    """Vectorised prediction.

    Returns ``(knots, sf_values, expected, logits)`` where ``sf_values`` has
    one row per image and ``logits`` is None for survbase.
    """
    head, logits = _features(model.params, model.spec, images)
    if model.spec.head.kind == "cox":
        risk = head @ model.params["cox.b"] - model.risk_offset
        knots = model.baseline.knots
        values = cox_survival_matrix(risk, model.baseline)
    else:
        w = _beran_weights(model, head)
        knots, values = beran_survival_matrix(w, model.background.times, model.background.events)
    return knots, values, expected_times(knots, values), logits


def predict_batch(model: TrainedModel, images) -> list:
    knots, values, expected, logits = predict_arrays(model, images)
    out = []
    for i in range(values.shape[0]):
        cl = am = None
        if logits is not None:
            cl = ConceptLogits(model.spec.schema, logits[i])
            am = cl.argmax()
        out.append(PredictionBundle(StepSurvivalFunction(knots, values[i]), float(expected[i]), cl, am))
    return out


def predict(model: TrainedModel, image) -> PredictionBundle:
    """Survival function, expected time and (except survbase) concept logits for one image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.spec.encoder.input_shape:
        raise ad.ShapeError(f"predict: image shape {image.shape} does not match {model.spec.encoder.input_shape}")
    return predict_batch(model, image[None])[0]


def concept_predictions(model: TrainedModel, images) -> np.ndarray:
    """Argmax concept values, shape (n, m)."""
    _, logits = _features(model.params, model.spec, images)
    if logits is None:
        raise ValueError("survbase models do not predict concepts")
    schema = model.spec.schema
    return np.stack([logits[:, schema.block(i)].argmax(axis=1) for i in range(schema.m)], axis=1)


# -- evaluation -------------------------------------------------------------------


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean F1 over the classes present in either argument."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def evaluate(model: TrainedModel, test: ConceptSurvivalDataset) -> Metrics:
    """C-index of expected times and per-concept macro F1 of argmax concepts."""
    if len(test) == 0:
        raise ValueError("empty dataset")
    _, _, expected, logits = predict_arrays(model, test.images)
    c = concordance_index(expected, test.times, test.events)
    if logits is None:
        return Metrics(c, [], None)
    schema = model.spec.schema
    f1 = [
        macro_f1(test.concepts[:, i], logits[:, schema.block(i)].argmax(axis=1)) for i in range(schema.m)
    ]
    return Metrics(c, f1, float(np.mean(f1)))
