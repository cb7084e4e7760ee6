"""
A small experiment sweep
========================

The harness trains every configured model on fresh datasets for each point
of a grid, repeats with independent seeds, and writes CSV and SVG reports.
The same run is available as ``conceptsurv experiment --config FILE``.
"""

import math
from pathlib import Path

from conceptsurv.harness.config import load_config
from conceptsurv.harness.experiment import run_experiment
from conceptsurv.harness.reports import export_reports

###############################################################################
# Configuration keys are flat and dotted, exactly as in a YAML config file.

cfg = load_config(**{
    "dataset.kind": "mnist",
    "dataset.pool_per_category": 60,
    "sweep.grid": [300, 600],
    "repetitions": 2,
    "models": ["survcbm-cox", "survbase-cox"],
    "train.epochs": 10,
})

###############################################################################
# Each (grid value, repetition) pair is one job; all models in a job share
# the same generated split.

result = run_experiment(cfg, progress=lambda done, total: print(f"job {done}/{total}"))
for s in result.summary:
    f1 = "  -  " if s.f1_mean_mean is None or math.isnan(s.f1_mean_mean) else f"{s.f1_mean_mean:.3f}"
    name = f"{s.model}-{s.head}"
    print(f"n={s.axis_value:<4} {name:13s} C-index {s.c_index_mean:.3f} ± {s.c_index_std:.3f}  F1 {f1}")

###############################################################################
# Reports: the per-run results table, summaries per metric and line charts.

for path in export_reports(result.rows, Path("demo_output") / "sweep", svg=True):
    print("wrote", path)
