"""Dependency-free SVG line/bar charts and patch-grid pictures.

Every chart embeds its data as CSV text inside ``<desc>`` so a figure can be
traced back to numbers without the companion CSV.
"""
from __future__ import annotations

from html import escape
from typing import Mapping, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _desc(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(map(str, header))] + [",".join(map(str, r)) for r in rows]
    return f"<desc>{escape(chr(10).join(lines))}</desc>"


def _frame(w, h, title, body, desc):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">\n'
            f"{desc}\n<title>{escape(title)}</title>\n"
            f'<rect width="{w}" height="{h}" fill="white"/>\n'
            f'<text x="{w / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>\n'
            f"{body}</svg>\n")


def line_chart(series: Mapping[str, Sequence[float]], title: str, xlabel: str = "", ylabel: str = "",
               x: Sequence[float] | None = None, width: int = 640, height: int = 360) -> str:
    names = list(series)
    n = max(len(v) for v in series.values())
    xs = list(x) if x is not None else list(range(n))
    ys = [v for s in series.values() for v in s]
    lo, hi = min(ys + [0.0]), max(ys + [1e-12])
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - lo) / (hi - lo or 1.0) * ph

    body = [f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>']
    for i, name in enumerate(names):
        pts = " ".join(f"{px(xs[j]):.2f},{py(v):.2f}" for j, v in enumerate(series[name]))
        c = PALETTE[i % len(PALETTE)]
        body.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{ml + 8}" y="{mt + 16 + 14 * i}" fill="{c}" font-size="11">{escape(name)}</text>')
    body.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" transform="rotate(-90 14 {mt + ph / 2})" '
                f'text-anchor="middle">{escape(ylabel)}</text>')
    body.append(f'<text x="{ml - 4}" y="{mt + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>')
    body.append(f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end" font-size="10">{lo:.3g}</text>')
    rows = [[xs[j]] + [series[nm][j] if j < len(series[nm]) else "" for nm in names] for j in range(n)]
    return _frame(width, height, title, "\n".join(body) + "\n", _desc(["x"] + names, rows))


def bar_chart(groups: Sequence[str], series: Mapping[str, Sequence[float]], title: str, ylabel: str = "",
              width: int = 640, height: int = 360) -> str:
    names = list(series)
    ys = [v for s in series.values() for v in s]
    hi = max(ys + [1e-12])
    ml, mr, mt, mb = 60, 20, 30, 60
    pw, ph = width - ml - mr, height - mt - mb
    slot = pw / max(len(groups), 1)
    bw = slot * 0.8 / max(len(names), 1)
    body = [f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>']
    for g, label in enumerate(groups):
        for i, name in enumerate(names):
            v = series[name][g]
            h = v / hi * ph
            body.append(f'<rect x="{ml + g * slot + slot * 0.1 + i * bw:.2f}" y="{mt + ph - h:.2f}" '
                        f'width="{bw:.2f}" height="{h:.2f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        body.append(f'<text x="{ml + (g + 0.5) * slot:.2f}" y="{mt + ph + 16}" text-anchor="middle" '
                    f'font-size="10">{escape(str(label))}</text>')
    for i, name in enumerate(names):
        body.append(f'<text x="{ml + 8}" y="{mt + 16 + 14 * i}" fill="{PALETTE[i % len(PALETTE)]}" '
                    f'font-size="11">{escape(name)}</text>')
    body.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" transform="rotate(-90 14 {mt + ph / 2})" '
                f'text-anchor="middle">{escape(ylabel)}</text>')
    rows = [[groups[g]] + [series[nm][g] for nm in names] for g in range(len(groups))]
    return _frame(width, height, title, "\n".join(body) + "\n", _desc(["group"] + names, rows))


def patch_grid(grid: tuple[int, int], informative, diverse, stage2, planted=(), title: str = "",
               cell: int = 36) -> str:
    """Patch picture: informative / diverse stage-1 fills, stage-2 outline, planted dot."""
    rows, cols = grid
    informative, diverse, stage2, planted = (set(int(i) for i in s) for s in (informative, diverse, stage2, planted))
    w, h = cols * cell + 20, rows * cell + 90
    body = []
    for idx in range(rows * cols):
        r, c = divmod(idx, cols)
        x, y = 10 + c * cell, 30 + r * cell
        fill = "#f2c14e" if idx in informative else "#7fb7e6" if idx in diverse else "#e6e6e6"
        body.append(f'<rect x="{x}" y="{y}" width="{cell - 2}" height="{cell - 2}" fill="{fill}"/>')
        if idx in stage2:
            body.append(f'<rect x="{x + 2}" y="{y + 2}" width="{cell - 6}" height="{cell - 6}" fill="none" '
                        f'stroke="#b22222" stroke-width="3"/>')
        if idx in planted:
            body.append(f'<circle cx="{x + cell / 2 - 1}" cy="{y + cell / 2 - 1}" r="4" fill="#222"/>')
    ly = 30 + rows * cell + 18
    body.append(f'<text x="10" y="{ly}" font-size="11">yellow: stage-1 informative, blue: stage-1 diverse</text>')
    body.append(f'<text x="10" y="{ly + 16}" font-size="11">red outline: kept at stage 2, dot: planted</text>')
    rows_desc = [[i, int(i in informative), int(i in diverse), int(i in stage2), int(i in planted)]
                 for i in range(rows * cols)]
    return _frame(w, h, title or "retained patches", "\n".join(body) + "\n",
                  _desc(["index", "informative", "diverse", "stage2", "planted"], rows_desc))
