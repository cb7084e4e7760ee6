"""Survival-statistics primitives.

Nonparametric estimators (Kaplan-Meier, Nelson-Aalen), the Cox and Beran
conditional survival functions, kernel weights and Harrell's concordance.

Every estimator accepts either a sequence of :class:`EventSample` or a pair of
``times, events`` arrays, and sorts internally. At tied times events are
ordered before censorings, so a sample censored at ``t`` is still at risk for
an event at ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EventSample",
    "StepSurvivalFunction",
    "StepCumulativeHazard",
    "as_arrays",
    "kaplan_meier",
    "nelson_aalen",
    "cox_survival",
    "cox_survival_matrix",
    "beran_survival",
    "beran_survival_matrix",
    "gaussian_weights",
    "per_value_weights",
    "expected_event_time",
    "expected_times",
    "concordance_index",
]

DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class EventSample:
    time: float
    event: bool

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"event time must be non-negative, got {self.time}")


def as_arrays(samples, events=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, events)`` float/bool arrays from either input form."""
    if events is None:
        samples = list(samples)
        times = np.array([s.time for s in samples], dtype=np.float64)
        events = np.array([bool(s.event) for s in samples], dtype=bool)
    else:
        times = np.asarray(samples, dtype=np.float64).ravel()
        events = np.asarray(events).astype(bool).ravel()
        if times.shape != events.shape:
            raise ValueError(
                f"times and events differ in length: {times.size} vs {events.size}"
            )
    if times.size and (not np.all(np.isfinite(times)) or times.min() < 0):
        raise ValueError("event times must be finite and non-negative")
    return times, events


def _sort_order(times: np.ndarray, events: np.ndarray) -> np.ndarray:
    # primary key time, events first at ties, otherwise stable
    return np.lexsort((~events, times))


class _StepFunction:
    """Right-continuous step function given by its knots and post-knot values."""

    _before = 0.0

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=np.float64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if knots.shape != values.shape:
            raise ValueError(
                f"knots and values differ in length: {knots.size} vs {values.size}"
            )
        if knots.size and (knots[0] < 0 or np.any(np.diff(knots) <= 0)):
            raise ValueError("knots must be strictly increasing and non-negative")
        knots.flags.writeable = False
        values.flags.writeable = False
        self.knots = knots
        self.values = values

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right")
        padded = np.concatenate(([self._before], self.values))
        out = padded[idx]
        return float(out) if out.ndim == 0 else out

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and np.array_equal(self.knots, other.knots)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"{type(self).__name__}(n_knots={self.knots.size})"


class StepSurvivalFunction(_StepFunction):
    """Non-increasing step survival function, equal to 1 before the first knot."""

    _before = 1.0

    def __init__(self, knots, values):
        super().__init__(knots, values)
        v = self.values
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("survival values must lie in [0, 1]")
        if np.any(np.diff(v) > 0):
            raise ValueError("survival values must be non-increasing")

    def expected_time(self) -> float:
        return expected_event_time(self)


class StepCumulativeHazard(_StepFunction):
    """Non-decreasing step cumulative hazard, equal to 0 before the first knot."""

    _before = 0.0

    def __init__(self, knots, values):
        super().__init__(knots, values)
        v = self.values
        if v.size and v.min() < 0:
            raise ValueError("cumulative hazard must be non-negative")
        if np.any(np.diff(v) < 0):
            raise ValueError("cumulative hazard must be non-decreasing")

    def to_survival(self) -> StepSurvivalFunction:
        return StepSurvivalFunction(self.knots, np.exp(-self.values))


def _risk_table(times, events):
    """Distinct times with event counts and at-risk counts."""
    knots, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events.astype(np.float64), minlength=knots.size)
    counts = np.bincount(inverse, minlength=knots.size)
    at_risk = times.size - np.concatenate(([0], np.cumsum(counts)[:-1]))
    return knots, deaths, at_risk


def kaplan_meier(samples, events=None) -> StepSurvivalFunction:
    """Product-limit estimate of the survival function.

    Knots are all distinct observed times, censored ones included.
    """
    times, events = as_arrays(samples, events)
    if times.size == 0:
        raise ValueError("empty dataset")
    knots, deaths, at_risk = _risk_table(times, events)
    values = np.cumprod(1.0 - deaths / at_risk)
    return StepSurvivalFunction(knots, np.clip(values, 0.0, 1.0))


def nelson_aalen(samples, events=None) -> StepCumulativeHazard:
    """Nelson-Aalen cumulative hazard: the running sum of ``d_i / n_i``."""
    times, events = as_arrays(samples, events)
    if times.size == 0:
        raise ValueError("empty dataset")
    knots, deaths, at_risk = _risk_table(times, events)
    return StepCumulativeHazard(knots, np.cumsum(deaths / at_risk))


def cox_survival_matrix(risk_scores, baseline: StepSurvivalFunction) -> np.ndarray:
    """Rows ``S_0(knots) ** exp(risk)``, one per risk score."""
    risk = np.asarray(risk_scores, dtype=np.float64).ravel()
    if not np.all(np.isfinite(risk)):
        raise ValueError("risk score must be finite")
    with np.errstate(over="ignore", under="ignore"):
        out = np.power(baseline.values[None, :], np.exp(risk)[:, None])
    # exp(risk) may underflow to 0, yet 0 ** a stays 0 for every finite risk
    out[:, baseline.values == 0.0] = 0.0
    return out


def cox_survival(risk_score: float, baseline: StepSurvivalFunction) -> StepSurvivalFunction:
    """Cox model survival ``S_0(t) ** exp(risk_score)`` on the baseline knots."""
    if not np.isfinite(risk_score):
        raise ValueError(f"risk score must be finite, got {risk_score}")
    values = cox_survival_matrix([risk_score], baseline)[0]
    return StepSurvivalFunction(baseline.knots, values)


def beran_survival_matrix(weights, times, events):
    """Beran estimates for a batch of weight rows over one background.

    Parameters
    ----------
    weights : array, shape (n_queries, n_background)
        Kernel weights, each row summing to one, aligned with ``times``.
    times, events : arrays, shape (n_background,)

    Returns
    -------
    knots : array
        Distinct background times.
    values : array, shape (n_queries, n_knots)
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    times, events = as_arrays(times, events)
    if w.shape[1] != times.size:
        raise ValueError(
            f"weights have {w.shape[1]} entries but background has {times.size} samples"
        )
    order = _sort_order(times, events)
    w, t, d = w[:, order], times[order], events[order]
    spent = np.cumsum(w, axis=1) - w
    denom = np.maximum(1.0 - spent, DENOM_FLOOR)
    factor = np.clip(1.0 - w / denom, 0.0, 1.0)
    factor[:, ~d] = 1.0
    surv = np.cumprod(factor, axis=1)
    # keep the value after the last sample of each tied group
    last = np.r_[t[1:] != t[:-1], True]
    return t[last], np.clip(surv[:, last], 0.0, 1.0)


def beran_survival(weights, background, events=None) -> StepSurvivalFunction:
    """Beran kernel estimate of the conditional survival function.

    ``weights`` is aligned with ``background`` (a list of EventSample, or the
    background times when ``events`` is given). When the weight mass already
    spent reaches one, the denominator is floored at 1e-12.
    """
    times, ev = as_arrays(background, events)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != times.size:
        raise ValueError(
            f"weights have {w.size} entries but background has {times.size} samples"
        )
    if times.size == 0:
        raise ValueError("empty dataset")
    knots, values = beran_survival_matrix(w[None, :], times, ev)
    return StepSurvivalFunction(knots, values[0])


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    z = -d
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gaussian_weights(query, background, tau: float) -> np.ndarray:
    """Softmax of ``-||query - x_k||^2 / tau`` over the background points."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    q = np.asarray(query, dtype=np.float64)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if q.ndim != 1 or bg.shape[1] != q.size:
        raise ValueError(
            f"dimension mismatch: query {q.shape} vs background {bg.shape}"
        )
    d = ((bg - q) ** 2).sum(axis=1) / tau
    return _softmax_neg(d)


def per_value_weights(query_logits, background_logits, tau) -> np.ndarray:
    """Kernel weights with one bandwidth per concept value.

    ``tau`` is either a flat array of length M or a list of per-concept blocks
    matching the logits' schema.
    """
    q = np.asarray(getattr(query_logits, "vector", query_logits), dtype=np.float64)
    bg = np.atleast_2d(
        np.asarray(
            [getattr(b, "vector", b) for b in background_logits]
            if not isinstance(background_logits, np.ndarray)
            else background_logits,
            dtype=np.float64,
        )
    )
    tau = getattr(tau, "tau", tau)
    if isinstance(tau, (list, tuple)):
        tau = np.concatenate([np.ravel(np.asarray(t, dtype=np.float64)) for t in tau])
    tau = np.asarray(tau, dtype=np.float64).ravel()
    if q.ndim != 1 or bg.shape[1] != q.size or tau.size != q.size:
        raise ValueError(
            f"schema mismatch: query {q.shape}, background {bg.shape}, tau {tau.shape}"
        )
    if np.any(tau <= 0):
        raise ValueError("every bandwidth must be positive")
    d = ((bg - q) ** 2 / tau).sum(axis=1)
    return _softmax_neg(d)


def expected_times(knots, values) -> np.ndarray:
    """Rectangle-rule mean of step survival rows up to the last knot."""
    knots = np.asarray(knots, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if knots.size == 0:
        return np.zeros(values.shape[0])
    return knots[0] + values[:, :-1] @ np.diff(knots)


def expected_event_time(sf: StepSurvivalFunction) -> float:
    """Area under ``sf`` from 0 to its last knot, using left-endpoint values.

    No tail beyond the last knot is extrapolated.
    """
    return float(expected_times(sf.knots, sf.values[None, :])[0])


def concordance_index(pred_times, samples, events=None) -> float:
    """Harrell's C-index over pairs with ``event_i`` and ``T_i < T_j``.

    A pair counts only when ``pred_i < pred_j`` strictly; tied predictions
    score 0.
    """
    times, ev = as_arrays(samples, events)
    pred = np.asarray(pred_times, dtype=np.float64).ravel()
    if pred.size != times.size:
        raise ValueError(
            f"pred_times has {pred.size} entries but there are {times.size} samples"
        )
    comparable = ev[:, None] & (times[:, None] < times[None, :])
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    concordant = comparable & (pred[:, None] < pred[None, :])
    return float(concordant.sum() / n_pairs)
