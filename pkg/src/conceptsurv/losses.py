"""Training objectives: concept cross-entropy, smoothed C-index and their mix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ConceptSchema
from .survival import as_arrays

__all__ = [
    "LossConfig",
    "concept_cross_entropy",
    "comparable_pairs",
    "smoothed_c_index",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    omega: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")


def concept_cross_entropy(logits, labels, schema: ConceptSchema) -> Tensor:
    """Mean over the batch of the concept-averaged negative log-likelihood.

    ``logits`` has shape (batch, M); ``labels`` has shape (batch, m).
    """
    logits = ad.tensor(logits)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[0]
    if logits.shape[1] != schema.M or labels.shape != (n, schema.m):
        raise ad.ShapeError(
            f"concept_cross_entropy: logits {logits.shape} / labels {labels.shape} "
            f"do not match schema (m={schema.m}, M={schema.M})"
        )
    for i, k in enumerate(schema.cardinalities):
        bad = (labels[:, i] < 0) | (labels[:, i] >= k)
        if bad.any():
            raise ValueError(
                f"label {labels[bad, i][0]} out of range for concept "
                f"{schema.names[i]!r} with {k} values"
            )
    rows = np.arange(n)
    picked = []
    for i in range(schema.m):
        logp = ad.log_softmax(logits[:, schema.block(i)], axis=1)
        picked.append(logp[rows, labels[:, i]])
    total = picked[0]
    for p in picked[1:]:
        total = total + p
    return -ad.mean(total) * (1.0 / schema.m)


def comparable_pairs(times, events) -> np.ndarray:
    """Matrix ``W[i, j] = 1[T_j < T_i] * delta_j``."""
    t, d = as_arrays(times, events)
    return ((t[None, :] < t[:, None]) & d[None, :]).astype(np.float64)


def smoothed_c_index(pred_times, times, events=None, omega: float = 1.0) -> Tensor:
    """Sigmoid relaxation of the C-index over all pairs of the batch.

    ``sigma((That_i - That_j) / omega)`` replaces the hard indicator for each
    pair with ``T_j < T_i`` and ``delta_j = 1``.
    """
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    if events is None:
        times, events = as_arrays(times)
    pred = ad.tensor(pred_times)
    pred = ad.reshape(pred, (-1,))
    pairs = comparable_pairs(times, events)
    if pairs.shape[0] != pred.shape[0]:
        raise ad.ShapeError(
            f"smoothed_c_index: {pred.shape[0]} predictions for {pairs.shape[0]} samples"
        )
    n_pairs = pairs.sum()
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    n = pred.shape[0]
    diff = ad.reshape(pred, (n, 1)) - ad.reshape(pred, (1, n))
    soft = ad.sigmoid(diff * (1.0 / omega))
    return ad.tsum(soft * pairs) * (1.0 / n_pairs)


def total_loss(l_surv, l_ce, alpha: float) -> Tensor:
    """``-alpha * l_surv + (1 - alpha) * l_ce``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return ad.tensor(l_surv) * (-alpha) + ad.tensor(l_ce) * (1.0 - alpha)
