"""Sweep runner: axis value x repetition x model, merged deterministically."""

from __future__ import annotations

import functools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..datagen import build_dataset, load_idx_pool, synth_glyph_pool, synth_tagged_pool
from ..models import ModelSpec, evaluate, fit
from .config import ExperimentConfig, parse_model_name

__all__ = ["MetricsRow", "SummaryRow", "ExperimentResult", "run_experiment", "make_pool", "rep_seed", "summarize"]

log = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    model: str
    head: str
    axis: str
    axis_value: float
    rep: int
    c_index: float | None = None
    f1_mean: float | None = None
    f1_per_concept: list = field(default_factory=list)
    wall_time_s: float | None = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SummaryRow:
    model: str
    head: str
    axis: str
    axis_value: float
    n_ok: int
    n_failed: int
    c_index_mean: float
    c_index_std: float
    f1_mean_mean: float
    f1_mean_std: float


@dataclass
class ExperimentResult:
    rows: list
    summary: list

    @property
    def failed_cells(self) -> list:
        return [(s.model, s.head, s.axis_value) for s in self.summary if s.n_ok == 0]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed_cells else 0


def rep_seed(base: int, rep: int) -> int:
    return int(base) ^ int(rep)


@functools.lru_cache(maxsize=4)
def _pool(kind, per_category, pool_seed, idx_images, idx_labels):
    if idx_images is not None:
        return load_idx_pool(idx_images, idx_labels)
    if kind == "cifar-style":
        return synth_tagged_pool(per_category, seed=pool_seed)
    return synth_glyph_pool(10, per_category, seed=pool_seed)


def make_pool(config: ExperimentConfig):
    v = config.values
    return _pool(v["dataset.kind"], int(v["dataset.pool_per_category"]), int(v["dataset.pool_seed"]),
                 v["dataset.idx_images"], v["dataset.idx_labels"])


def build_split(config: ExperimentConfig, axis_value, rep: int):
    """Generate the dataset of one (axis value, repetition) cell and split it."""
    seed = rep_seed(config["seed"], rep)
    n, rho = config.cell(axis_value)
    ds = build_dataset(config["dataset.kind"], make_pool(config), n, config.generation(rho, seed))
    return ds.train_test_split(float(config["test_fraction"]), seed=seed)


def model_spec(config: ExperimentConfig, name: str, schema, input_shape) -> ModelSpec:
    arch, head = parse_model_name(name)
    v = config.values
    out_dim = max(schema.cardinalities) if arch == "survcbm" else int(v["encoder.embedding_dim"])
    return ModelSpec(
        arch,
        config.head_spec(head),
        schema,
        config.encoder_config(input_shape, out_dim),
        int(v["encoder.embedding_dim"]),
        tuple(v["encoder.concept_hidden"]),
    )


def _error(err: BaseException) -> str:
    msg = " ".join(str(err).split())
    return f"error: {type(err).__name__}: {msg}" if msg else f"error: {type(err).__name__}"


def _run_job(config: ExperimentConfig, axis_value, rep: int) -> list:
    axis = config["sweep.axis"]
    timing = bool(config["timing"])
    rows = []
    try:
        train, test = build_split(config, axis_value, rep)
    except Exception as err:  # recorded per row, the sweep goes on
        log.warning("axis %s=%s rep %d: data generation failed: %s", axis, axis_value, rep, err)
        for name in config["models"]:
            arch, head = parse_model_name(name)
            rows.append(MetricsRow(arch, head, axis, axis_value, rep, status=_error(err)))
        return rows
    seed = rep_seed(config["seed"], rep)
    for name in config["models"]:
        arch, head = parse_model_name(name)
        start = time.perf_counter()
        try:
            spec = model_spec(config, name, train.schema, train.image_shape)
            model = fit(spec, train, config.train_config(seed))
            m = evaluate(model, test)
        except Exception as err:
            log.warning("%s axis %s=%s rep %d failed: %s", name, axis, axis_value, rep, err)
            rows.append(MetricsRow(arch, head, axis, axis_value, rep, status=_error(err)))
            continue
        elapsed = time.perf_counter() - start if timing else None
        rows.append(MetricsRow(arch, head, axis, axis_value, rep, m.c_index, m.f1_mean, list(m.f1_per_concept), elapsed))
    return rows


def _job(args):
    config, axis_value, rep = args
    return _run_job(config, axis_value, rep)


def _mean_std(values):
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def summarize(rows) -> list:
    """Mean and sample standard deviation per (model, head, axis value), over successful rows."""
    groups = {}
    for r in rows:
        groups.setdefault((r.model, r.head, r.axis, r.axis_value), []).append(r)
    out = []
    for (model, head, axis, value), group in groups.items():
        ok = [r for r in group if r.ok]
        c_mean, c_std = _mean_std([r.c_index for r in ok])
        f_mean, f_std = _mean_std([r.f1_mean for r in ok if r.f1_mean is not None])
        out.append(SummaryRow(model, head, axis, value, len(ok), len(group) - len(ok), c_mean, c_std, f_mean, f_std))
    return out


def run_experiment(config: ExperimentConfig, threads: int | None = None, progress=None) -> ExperimentResult:
    """Run every (axis value, repetition) job and collect one row per model.

    Jobs run in a process pool when ``threads`` > 1; rows are merged by
    (axis value, repetition, model order), so the output does not depend on
    the worker count.
    """
    threads = int(threads or config["threads"])
    jobs = [(config, value, rep) for value in config.axis_values for rep in range(int(config["repetitions"]))]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_job(job))
            if progress is not None:
                progress(i + 1, len(jobs))
    rows = [row for batch in results for row in batch]
    return ExperimentResult(rows, summarize(rows))
