"""CSV report schemas and self-contained SVG charts.

Schemas (header rows are written verbatim):

- train log: ``epoch, split, metric_name, value``
- evaluation: ``sample_id, class_id, dice, sigma2_jac, fold_pct`` where
  ``class_id`` is a class index or ``mean``
- sweep: ``lambda, val_mean_dice``
- comparison: ``report_a, report_b, p, d, threshold, significant``
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from xml.sax.saxutils import escape, quoteattr

import numpy as np

TRAIN_LOG_COLUMNS = ("epoch", "split", "metric_name", "value")
EVALUATION_COLUMNS = ("sample_id", "class_id", "dice", "sigma2_jac", "fold_pct")
SWEEP_COLUMNS = ("lambda", "val_mean_dice")
COMPARE_COLUMNS = ("report_a", "report_b", "p", "d", "threshold", "significant")


class SchemaError(ValueError):
    """A CSV file does not follow the expected schema."""


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path, columns) -> list[dict]:
    """Rows of a CSV as dicts; every column in ``columns`` must be present and rows non-empty."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


# -- typed readers and writers ------------------------------------------------------------------


def write_train_log(log, path) -> None:
    write_csv(path, TRAIN_LOG_COLUMNS, log.rows())


def write_evaluation(rows, path) -> None:
    """``rows`` are :class:`~deepsimreg.evaluation.SampleEvaluation` objects."""
    out = []
    for r in rows:
        for c, d in sorted(r.class_dice.items()):
            out.append((r.sample_id, c, d, r.sigma2_jac, r.fold_pct))
        out.append((r.sample_id, "mean", r.mean_dice, r.sigma2_jac, r.fold_pct))
    write_csv(path, EVALUATION_COLUMNS, out)


def read_evaluation_means(path) -> OrderedDict:
    """``{sample_id: mean dice}`` from an evaluation report."""
    rows = read_csv(path, EVALUATION_COLUMNS)
    out = OrderedDict()
    for r in rows:
        if r["class_id"] == "mean":
            if r["sample_id"] in out:
                raise SchemaError(f"{path}: duplicate mean row for sample {r['sample_id']!r}")
            out[r["sample_id"]] = float(r["dice"])
    if not out:
        raise SchemaError(f"{path}: no per-sample mean rows")
    return out


def write_sweep(scores: dict, path) -> None:
    write_csv(path, SWEEP_COLUMNS, [(lam, scores[lam]) for lam in sorted(scores)])


def read_sweep(path) -> list[tuple[float, float]]:
    return sorted((float(r["lambda"]), float(r["val_mean_dice"])) for r in read_csv(path, SWEEP_COLUMNS))


def read_convergence(path, metric: str = "mean_dice", split: str = "val") -> list[tuple[int, float]]:
    rows = read_csv(path, TRAIN_LOG_COLUMNS)
    pts = [(int(r["epoch"]), float(r["value"])) for r in rows if r["metric_name"] == metric and r["split"] == split]
    if not pts:
        raise SchemaError(f"{path}: no {split} {metric} rows")
    return sorted(pts)


# -- SVG ----------------------------------------------------------------------------------------

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=40, bottom=56)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


class _Axes:
    """Linear (or log10) mapping from data coordinates to the plot rectangle."""

    def __init__(self, xlim, ylim, logx=False):
        self.logx = logx
        self.x0, self.x1 = self._pad(*(self._tx(v) for v in xlim))
        self.y0, self.y1 = self._pad(*ylim)
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    @staticmethod
    def _pad(lo, hi):
        if hi - lo < 1e-12:
            return lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    def _tx(self, x):
        return math.log10(x) if self.logx else x

    def px(self, x) -> float:
        return self.left + (self._tx(x) - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y) -> float:
        return self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _svg(body: list[str], title: str) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _frame(ax: _Axes, xlabel: str, ylabel: str, xticks, yticks, xtick_labels=None) -> list[str]:
    out = [f'<rect x="{ax.left}" y="{ax.top}" width="{ax.right - ax.left}" height="{ax.bottom - ax.top}" '
           f'fill="none" stroke="black"/>']
    for i, t in enumerate(xticks):
        x = ax.px(t)
        label = xtick_labels[i] if xtick_labels else f"{t:g}"
        out.append(f'<line x1="{x:.2f}" y1="{ax.bottom}" x2="{x:.2f}" y2="{ax.bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{ax.bottom + 18}" text-anchor="middle">{escape(label)}</text>')
    for t in yticks:
        y = ax.py(t)
        out.append(f'<line x1="{ax.left - 5}" y1="{y:.2f}" x2="{ax.left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{ax.left - 8}" y="{y + 4:.2f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{(ax.left + ax.right) / 2}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(ax.top + ax.bottom) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(ax.top + ax.bottom) / 2})">{escape(ylabel)}</text>')
    return out


def _nice_ticks(lo, hi, n=5):
    if hi - lo < 1e-12:
        return [lo]
    return list(np.linspace(lo, hi, n))


def _legend(labels, x=WIDTH - MARGIN["right"] + 12, y=MARGIN["top"] + 10) -> list[str]:
    out = []
    for i, label in enumerate(labels):
        c = PALETTE[i % len(PALETTE)]
        yy = y + 18 * i
        out.append(f'<line x1="{x}" y1="{yy}" x2="{x + 20}" y2="{yy}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{x + 26}" y="{yy + 4}">{escape(label)}</text>')
    return out


def convergence_svg(series: dict[str, list[tuple[int, float]]], title="Validation mean Dice during training") -> str:
    """One polyline per label, Dice against epoch."""
    if not series:
        raise ValueError("no series to plot")
    xs = [e for pts in series.values() for e, _ in pts]
    ys = [v for pts in series.values() for _, v in pts]
    ax = _Axes((min(xs), max(xs)), (min(ys), max(ys)))
    body = _frame(ax, "epoch", "validation mean Dice", sorted(set(xs)) if len(set(xs)) <= 12 else
                  _nice_ticks(min(xs), max(xs)), _nice_ticks(min(ys), max(ys)))
    for i, (label, pts) in enumerate(series.items()):
        coords = " ".join(f"{ax.px(e):.2f},{ax.py(v):.2f}" for e, v in pts)
        body.append(f'<polyline data-label={quoteattr(label)} points="{coords}" fill="none" '
                    f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
    body += _legend(list(series))
    return _svg(body, title)


def sweep_svg(points: list[tuple[float, float]], title="Regularizer weight selection") -> str:
    """Validation Dice against lambda on a log10 axis; the best point is highlighted."""
    if not points:
        raise ValueError("no sweep points")
    if any(lam <= 0 for lam, _ in points):
        raise ValueError("lambda must be positive on a log axis")
    lams = [p[0] for p in points]
    vals = [p[1] for p in points]
    ax = _Axes((min(lams), max(lams)), (min(vals), max(vals)), logx=True)
    body = _frame(ax, "lambda (log scale)", "validation mean Dice", lams, _nice_ticks(min(vals), max(vals)))
    coords = " ".join(f"{ax.px(lam):.2f},{ax.py(v):.2f}" for lam, v in points)
    body.append(f'<polyline data-label="sweep" points="{coords}" fill="none" stroke="{PALETTE[0]}" stroke-width="2"/>')
    best = max(points, key=lambda p: (p[1], p[0]))
    for lam, v in points:
        fill = PALETTE[1] if (lam, v) == best else PALETTE[0]
        body.append(f'<circle data-lambda="{lam!r}" cx="{ax.px(lam):.2f}" cy="{ax.py(v):.2f}" r="4" fill="{fill}"/>')
    return _svg(body, title)


def box_stats(values) -> dict:
    """Median, quartiles, 10th/90th percentiles (whiskers) and the points beyond them."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("box plot needs at least one value")
    p10, q1, med, q3, p90 = np.percentile(v, [10, 25, 50, 75, 90])
    outliers = sorted(float(x) for x in v if x < p10 or x > p90)
    return dict(p10=float(p10), q1=float(q1), median=float(med), q3=float(q3), p90=float(p90), outliers=outliers)


def boxplot_svg(groups: dict[str, list[float]], title="Mean Dice per model") -> str:
    """Box: quartiles; centre line: median; whiskers: 10th-90th percentile; dots: outliers."""
    if not groups:
        raise ValueError("no groups to plot")
    stats = {k: box_stats(v) for k, v in groups.items()}
    allv = [x for v in groups.values() for x in v]
    n = len(groups)
    ax = _Axes((0.5, n + 0.5), (min(allv), max(allv)))
    body = _frame(ax, "model", "mean Dice", list(range(1, n + 1)), _nice_ticks(min(allv), max(allv)),
                  xtick_labels=list(groups))
    half = 0.25 * (ax.px(2) - ax.px(1)) if n > 1 else 40
    for i, (label, s) in enumerate(stats.items(), start=1):
        x = ax.px(i)
        c = PALETTE[(i - 1) % len(PALETTE)]
        attrs = " ".join(f'data-{k}="{s[k]!r}"' for k in ("p10", "q1", "median", "q3", "p90"))
        body.append(f'<g class="box" data-label={quoteattr(label)} {attrs}>')
        body.append(f'<line x1="{x:.2f}" y1="{ax.py(s["p10"]):.2f}" x2="{x:.2f}" y2="{ax.py(s["q1"]):.2f}" stroke="black"/>')
        body.append(f'<line x1="{x:.2f}" y1="{ax.py(s["q3"]):.2f}" x2="{x:.2f}" y2="{ax.py(s["p90"]):.2f}" stroke="black"/>')
        for key in ("p10", "p90"):
            y = ax.py(s[key])
            body.append(f'<line x1="{x - half / 2:.2f}" y1="{y:.2f}" x2="{x + half / 2:.2f}" y2="{y:.2f}" stroke="black"/>')
        top, bottom = ax.py(s["q3"]), ax.py(s["q1"])
        body.append(f'<rect x="{x - half:.2f}" y="{top:.2f}" width="{2 * half:.2f}" height="{bottom - top:.2f}" '
                    f'fill="{c}" fill-opacity="0.35" stroke="{c}"/>')
        ym = ax.py(s["median"])
        body.append(f'<line class="median" x1="{x - half:.2f}" y1="{ym:.2f}" x2="{x + half:.2f}" y2="{ym:.2f}" '
                    f'stroke="black" stroke-width="2"/>')
        for o in s["outliers"]:
            body.append(f'<circle class="outlier" cx="{x:.2f}" cy="{ax.py(o):.2f}" r="2.5" fill="none" stroke="{c}"/>')
        body.append("</g>")
    return _svg(body, title)
