"""Minimal SVG heatmap writer for similarity grids (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

# viridis anchor colours, linearly interpolated
_STOPS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def colour(v: float, lo: float = 0.0, hi: float = 1.0) -> str:
    t = 0.0 if hi <= lo else float(np.clip((v - lo) / (hi - lo), 0.0, 1.0))
    pos = t * (len(_STOPS) - 1)
    i = min(int(pos), len(_STOPS) - 2)
    rgb = _STOPS[i] + (pos - i) * (_STOPS[i + 1] - _STOPS[i])
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def render_svg(values: np.ndarray, row_labels, col_labels, title: str = "",
               lo: float = 0.0, hi: float = 1.0, cell: int = 56) -> str:
    values = np.asarray(values, dtype=float)
    nr, nc = values.shape
    left = 10 + 7 * max((len(str(r)) for r in row_labels), default=4)
    top = 40
    bottom = 10 + 6 * max((len(str(c)) for c in col_labels), default=4)
    bar_x = left + nc * cell + 20
    width = bar_x + 70
    height = top + nr * cell + bottom
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="13">{escape(title)}</text>',
    ]
    for i in range(nr):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">'
                   f'{escape(str(row_labels[i]))}</text>')
        for j in range(nc):
            x = left + j * cell
            v = values[i, j]
            ink = "#000" if (v - lo) / ((hi - lo) or 1) > 0.6 else "#fff"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{colour(v, lo, hi)}"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                       f'fill="{ink}">{v:.2f}</text>')
    base = top + nr * cell + 12
    for j, label in enumerate(col_labels):
        x = left + j * cell + cell / 2
        out.append(f'<text x="{x}" y="{base}" transform="rotate(45 {x} {base})">'
                   f'{escape(str(label))}</text>')
    steps = 20
    bar_h = nr * cell
    for k in range(steps):
        v = hi - (hi - lo) * (k + 0.5) / steps
        out.append(f'<rect x="{bar_x}" y="{top + k * bar_h / steps:.2f}" width="14" '
                   f'height="{bar_h / steps + 0.5:.2f}" fill="{colour(v, lo, hi)}"/>')
    out.append(f'<text x="{bar_x + 18}" y="{top + 8}">{hi:g}</text>')
    out.append(f'<text x="{bar_x + 18}" y="{top + bar_h}">{lo:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
