"""Concept-level explanations of predicted survival functions.

``explain_with_neighbors`` is example based: it finds the training instances
whose predicted survival functions lie closest to the explained one and scores
each concept by how often their predicted value agrees with the instance's.
``explain_cox_contributions`` splits a Cox risk score ``b.pi`` into one term
per concept block, with ``pi`` the softmax of each logit block.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import ConceptSurvivalDataset
from .models import TrainedModel, predict_arrays
from .survival import StepSurvivalFunction

__all__ = [
    "NeighborSet",
    "ExplanationReport",
    "sf_distance",
    "sf_distance_matrix",
    "scores_from_counts",
    "neighbor_match_scores",
    "explain_with_neighbors",
    "explain_cox_contributions",
    "neighbor_panel_svg",
]


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    concepts: np.ndarray
    predicted_concepts: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.distances) < 0):
            raise ValueError("neighbor distances must be sorted ascending")
        if np.unique(self.indices).size != self.indices.size:
            raise ValueError("neighbor indices must be distinct")


@dataclass
class ExplanationReport:
    method: str
    concept_names: list
    scores: np.ndarray
    support: dict = field(default_factory=dict)
    neighbors: NeighborSet | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.size != len(self.concept_names):
            raise ValueError("one score per concept is required")
        if self.method == "neighbor-match" and (self.scores.min() < 0 or self.scores.max() > 1):
            raise ValueError("neighbor-match scores must lie in [0, 1]")

    def to_dict(self) -> dict:
        concepts = []
        for i, name in enumerate(self.concept_names):
            entry = {"concept": name, "score": float(self.scores[i])}
            for key, values in self.support.items():
                if isinstance(values, (list, np.ndarray)) and len(values) == len(self.concept_names):
                    v = values[i]
                    entry[key] = v.tolist() if isinstance(v, np.ndarray) else v
            concepts.append(entry)
        out = {"method": self.method, "concepts": concepts}
        extra = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in self.support.items()
            if not (isinstance(v, (list, np.ndarray)) and len(v) == len(self.concept_names))
        }
        if extra:
            out["summary"] = extra
        if self.neighbors is not None:
            out["neighbors"] = {
                "indices": self.neighbors.indices.tolist(),
                "distances": self.neighbors.distances.tolist(),
                "true_concepts": self.neighbors.concepts.tolist(),
                "predicted_concepts": self.neighbors.predicted_concepts.tolist(),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _on_grid(knots, values, grid, before):
    idx = np.searchsorted(knots, grid, side="right")
    return np.concatenate(([before], values))[idx]


def sf_distance(a: StepSurvivalFunction, b: StepSurvivalFunction, horizon: float | None = None) -> float:
    """L2 distance between two step survival functions.

    Integrated from 0 to ``horizon``, by default the larger last knot of the
    pair; each function is held at its final value past its own last knot.
    The default horizon depends on the pair, so the triangle inequality is
    only guaranteed among functions sharing a last knot (such as all
    predictions of one model) or under a common explicit ``horizon``.
    """
    grid = np.union1d(np.union1d(a.knots, b.knots), [0.0])
    if horizon is not None:
        if not horizon >= 0:
            raise ValueError(f"horizon must be non-negative, got {horizon}")
        grid = np.union1d(grid[grid < horizon], [horizon])
    if grid.size < 2:
        return 0.0
    diff = _on_grid(a.knots, a.values, grid[:-1], 1.0) - _on_grid(b.knots, b.values, grid[:-1], 1.0)
    return float(np.sqrt(np.sum(diff**2 * np.diff(grid))))


def sf_distance_matrix(knots, query_values, other_values) -> np.ndarray:
    """L2 distances between rows that share one knot grid.

    Returns an array of shape (n_query, n_other).
    """
    knots = np.asarray(knots, dtype=np.float64)
    grid = np.union1d(knots, [0.0])
    q = np.atleast_2d(query_values)
    o = np.atleast_2d(other_values)
    qg = np.stack([_on_grid(knots, r, grid[:-1], 1.0) for r in q])
    og = np.stack([_on_grid(knots, r, grid[:-1], 1.0) for r in o])
    w = np.sqrt(np.diff(grid))
    qg, og = qg * w, og * w
    d2 = (qg**2).sum(1)[:, None] + (og**2).sum(1)[None, :] - 2 * qg @ og.T
    return np.sqrt(np.maximum(d2, 0.0))


def scores_from_counts(counts, k: int) -> np.ndarray:
    """Neighbor-match importance: matching neighbors over ``k``."""
    counts = np.asarray(counts, dtype=np.float64)
    if k < 1 or np.any(counts < 0) or np.any(counts > k):
        raise ValueError("counts must lie in [0, k] with k >= 1")
    return counts / k


def neighbor_match_scores(instance_values, neighbor_values):
    """Per-concept count and share of neighbors whose value equals the instance's."""
    neighbor_values = np.atleast_2d(neighbor_values)
    counts = (neighbor_values == np.asarray(instance_values)[None, :]).sum(axis=0)
    return counts, scores_from_counts(counts, neighbor_values.shape[0])


def _argmax_concepts(logits, schema):
    return np.stack([logits[:, schema.block(i)].argmax(axis=1) for i in range(schema.m)], axis=1)


def explain_with_neighbors(model: TrainedModel, instance, train: ConceptSurvivalDataset, k: int = 9,
                           _train_predictions=None) -> ExplanationReport:
    """Score concepts by agreement among the ``k`` nearest training SFs.

    Both the instance's and the neighbors' concept values are the model's
    predictions; the neighbors' true concepts are reported alongside.
    """
    if model.spec.head.kind != "beran":
        raise ValueError("neighbor explanations are defined for Beran-headed models")
    if not model.spec.uses_concepts:
        raise ValueError("neighbor explanations need a concept-predicting model")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in [1, {len(train)}], got {k}")
    schema = model.spec.schema
    knots, q_values, _, q_logits = predict_arrays(model, np.asarray(instance)[None])
    if _train_predictions is None:
        _train_predictions = predict_arrays(model, train.images)
    t_knots, t_values, _, t_logits = _train_predictions
    dist = sf_distance_matrix(knots, q_values, t_values)[0]
    order = np.lexsort((np.arange(dist.size), dist))[:k]
    q_pred = _argmax_concepts(q_logits, schema)[0]
    t_pred = _argmax_concepts(t_logits[order], schema)
    counts, scores = neighbor_match_scores(q_pred, t_pred)
    neighbors = NeighborSet(order, dist[order], train.concepts[order], t_pred)
    support = {
        "predicted_value": q_pred.tolist(),
        "match_count": counts.tolist(),
        "k": k,
    }
    return ExplanationReport("neighbor-match", list(schema.names), scores, support, neighbors)


def explain_cox_contributions(model: TrainedModel, instance) -> ExplanationReport:
    """Per-concept terms ``b_i . softmax(p_i)`` of the Cox risk score."""
    if model.spec.head.kind != "cox" or model.spec.architecture != "survcbm":
        raise ValueError("Cox contributions need a survcbm model with a Cox head")
    schema = model.spec.schema
    _, _, _, logits = predict_arrays(model, np.asarray(instance)[None])
    b = model.params["cox.b"]
    probs, contrib = [], []
    for i in range(schema.m):
        p = logits[0, schema.block(i)]
        e = np.exp(p - p.max())
        pi = e / e.sum()
        probs.append(pi)
        contrib.append(float(b[schema.block(i)] @ pi))
    support = {
        "probabilities": [p.tolist() for p in probs],
        "coefficients": [b[schema.block(i)].tolist() for i in range(schema.m)],
        "total": float(np.sum(contrib)),
    }
    return ExplanationReport("cox-contribution", list(schema.names), np.array(contrib), support)


def _png_data_uri(image) -> str:
    from PIL import Image

    a = np.asarray(image)
    a = np.clip(a, 0, 1)
    if a.shape[-1] == 1:
        a = a[..., 0]
    buf = io.BytesIO()
    Image.fromarray((a * 255).round().astype(np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def neighbor_panel_svg(instance_image, neighbor_images, instance_label: str = "",
                       neighbor_labels=(), scale: int = 2) -> str:
    """SVG 1.1 panel: the explained image followed by its neighbors with captions."""
    h, w = np.asarray(instance_image).shape[:2]
    cw, ch = w * scale, h * scale
    gap, caption = 8, 16
    items = [(instance_image, instance_label or "instance")]
    labels = list(neighbor_labels) + [""] * (len(neighbor_images) - len(neighbor_labels))
    items += list(zip(neighbor_images, labels))
    width = len(items) * (cw + gap) + gap
    height = ch + caption + 2 * gap
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'version="1.1" width="{width}" height="{height}">',
    ]
    for j, (img, label) in enumerate(items):
        x = gap + j * (cw + gap)
        parts.append(
            f'<image x="{x}" y="{gap}" width="{cw}" height="{ch}" xlink:href="{_png_data_uri(img)}"/>'
        )
        parts.append(
            f'<text x="{x + cw / 2}" y="{gap + ch + caption - 3}" font-size="11" '
            f'text-anchor="middle" font-family="sans-serif">{label}</text>'
        )
        if j == 0:
            parts.append(
                f'<rect x="{x - 2}" y="{gap - 2}" width="{cw + 4}" height="{ch + 4}" '
                'fill="none" stroke="red" stroke-width="2"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
