"""CSV and SVG output of experiment results."""

from __future__ import annotations

import csv
import io
import math
import os
from pathlib import Path

from .experiment import MetricsRow, summarize

__all__ = ["RESULTS_HEADER", "SUMMARY_HEADER", "METRICS", "export_reports", "read_results", "results_csv", "line_chart_svg"]

RESULTS_HEADER = ["model", "head", "axis", "axis_value", "rep", "c_index", "f1_mean", "f1_per_concept", "wall_time_s", "status"]
SUMMARY_HEADER = ["model", "head", "axis", "axis_value", "n_ok", "n_failed", "mean", "std"]
METRICS = ("c_index", "f1_mean")


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _axis(x) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_csv(rows) -> str:
    return _csv_text(
        RESULTS_HEADER,
        (
            [r.model, r.head, r.axis, _axis(r.axis_value), r.rep, _num(r.c_index), _num(r.f1_mean),
             ";".join(_num(f) for f in r.f1_per_concept), _num(r.wall_time_s), r.status]
            for r in rows
        ),
    )


def _summary_csv(summary, metric) -> str:
    return _csv_text(
        SUMMARY_HEADER,
        (
            [s.model, s.head, s.axis, _axis(s.axis_value), s.n_ok, s.n_failed,
             _num(getattr(s, f"{metric}_mean")), _num(getattr(s, f"{metric}_std"))]
            for s in summary
        ),
    )


def read_results(path) -> list:
    """Parse a results CSV back into MetricsRow objects."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for line in reader:
            d = dict(zip(RESULTS_HEADER, line))
            f = lambda k: float(d[k]) if d[k] != "" else None  # noqa: E731
            rows.append(
                MetricsRow(
                    d["model"], d["head"], d["axis"], float(d["axis_value"]), int(d["rep"]),
                    f("c_index"), f("f1_mean"),
                    [float(v) for v in d["f1_per_concept"].split(";") if v],
                    f("wall_time_s"), d["status"],
                )
            )
    return rows


def line_chart_svg(summary, metric: str, title: str = "") -> str:
    """Mean +/- std band and one polyline per model over the axis values."""
    series = {}
    for s in summary:
        mean, std = getattr(s, f"{metric}_mean"), getattr(s, f"{metric}_std")
        if s.n_ok and not math.isnan(mean):
            series.setdefault(f"{s.model}-{s.head}", []).append((float(s.axis_value), mean, std))
    W, H, L, R, T, B = 560, 360, 60, 150, 30, 45
    xs = sorted({x for pts in series.values() for x, _, _ in pts}) or [0.0, 1.0]
    x0, x1 = xs[0], xs[-1] if xs[-1] > xs[0] else xs[0] + 1
    lo = min((m - s for pts in series.values() for _, m, s in pts), default=0.0)
    hi = max((m + s for pts in series.values() for _, m, s in pts), default=1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    px = lambda x: L + (x - x0) / (x1 - x0) * (W - L - R)  # noqa: E731
    py = lambda y: T + (hi - y) / (hi - lo) * (H - T - B)  # noqa: E731
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title or metric}</text>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
    ]
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{H - B + 15}" text-anchor="middle" font-family="sans-serif" font-size="10">{_axis(x)}</text>')
    for k in range(5):
        y = lo + (hi - lo) * k / 4
        out.append(f'<text x="{L - 6}" y="{py(y) + 3:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.3f}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        pts.sort()
        c = colors[i % len(colors)]
        upper = " ".join(f"{px(x):.2f},{py(m + s):.2f}" for x, m, s in pts)
        lower = " ".join(f"{px(x):.2f},{py(m - s):.2f}" for x, m, s in reversed(pts))
        out.append(f'<polygon points="{upper} {lower}" fill="{c}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m, _ in pts)
        out.append(f'<polyline points="{line}" fill="none" stroke="{c}" stroke-width="2"/>')
        ly = T + 14 * i + 10
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}" font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_reports(rows, out_dir, svg: bool = False) -> list:
    """Write results.csv, one summary CSV per metric and optionally SVG charts.

    Returns the written paths. Nothing is written when ``rows`` is empty.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no results to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    summary = summarize(rows)
    files = {"results.csv": results_csv(rows)}
    for metric in METRICS:
        files[f"summary_{metric}.csv"] = _summary_csv(summary, metric)
        if svg:
            files[f"{metric}.svg"] = line_chart_svg(summary, metric, f"{metric} vs {rows[0].axis}")
    written = []
    for name, text in files.items():
        path = out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)
    return written
