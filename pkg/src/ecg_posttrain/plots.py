"""Deterministic static SVG line plots (fixed size, fixed number formatting)."""
from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)


class PlotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot_svg(series: dict[str, list[tuple[float, float]]], title: str = "",
                  xlabel: str = "", ylabel: str = "") -> str:
    """One ``<polyline>`` per series, in the given series order."""
    if not series or not any(series.values()):
        raise PlotError("nothing to plot")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = (y1 - y0) * 0.05 or 0.01
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_fmt(px(t))}" y="{HEIGHT - MARGIN["bottom"] + 18}" '
                   f'text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"] - 4}" y1="{_fmt(py(t))}" x2="{MARGIN["left"]}" '
                   f'y2="{_fmt(py(t))}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(py(t) + 4)}" text-anchor="end">{t:.3f}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.0f})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = MARGIN["top"] + 16 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_csv(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def median_series(rows, group: str, x: str, y: str) -> dict[str, list[tuple[float, float]]]:
    """Median of ``y`` per (group, x), keyed by group in first-seen order."""
    acc: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        try:
            acc[r[group]][float(r[x])].append(float(r[y]))
        except (KeyError, ValueError) as exc:
            raise PlotError(f"malformed row {r}: {exc}") from None
    return {g: [(xv, statistics.median(v)) for xv, v in sorted(d.items())] for g, d in acc.items()}


def emit_plots(csv_path: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render the plots matching a result CSV's schema; returns written files."""
    csv_path = Path(csv_path)
    out = Path(out_dir) if out_dir else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    rows = read_csv(csv_path)
    cols = set(rows[0])
    jobs = []
    if {"recipe", "epoch", "test_auroc"} <= cols:
        for split in ("val", "test"):
            for m, label in (("auroc", "macro AUROC"), ("auprc", "macro AUPRC")):
                jobs.append((f"curves_{split}_{m}.svg", "recipe", "epoch", f"{split}_{m}",
                             f"{split} {label} per epoch", "epoch", label))
    elif {"recipe", "fraction", "macro_auroc"} <= cols:
        for m, label in (("auroc", "macro AUROC"), ("auprc", "macro AUPRC")):
            jobs.append((f"sweep_{m}.svg", "recipe", "fraction", f"macro_{m}",
                         f"test {label} vs training fraction", "training fraction", label))
    elif {"epoch", "val_auroc", "lr"} <= cols:
        for rows_y, label in (("val_auroc", "val macro AUROC"), ("val_auprc", "val macro AUPRC")):
            for r in rows:
                r.setdefault("run", csv_path.parent.name)
            jobs.append((f"{csv_path.stem}_{rows_y}.svg", "run", "epoch", rows_y, label, "epoch", label))
    else:
        raise PlotError(f"{csv_path}: unrecognized columns {sorted(cols)}")
    written = []
    for fname, group, x, y, title, xl, yl in jobs:
        svg = line_plot_svg(median_series(rows, group, x, y), title, xl, yl)
        p = out / fname
        p.write_text(svg)
        written.append(p)
    return written
