"""Plain SVG text for KM curves and attention scatters

Output depends only on the inputs, so the files can be compared verbatim.
"""

from __future__ import annotations

from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np

from .interpret import AttentionMap
from .stats import KmCurve

WIDTH, HEIGHT, MARGIN = 480, 320, 40
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _num(x: float) -> str:
    return f"{x:.2f}"


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]


def km_svg(curves: Mapping[str, KmCurve], title: str = "Kaplan-Meier") -> str:
    """One step polyline per group, survival on [0, 1] against time"""
    t_max = max((float(c.times.max()) for c in curves.values()), default=1.0)
    t_max = t_max if t_max > 0 else 1.0
    inner_w, inner_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def xy(t: float, s: float) -> str:
        x = MARGIN + inner_w * t / t_max
        y = MARGIN + inner_h * (1 - s)
        return f"{_num(x)},{_num(y)}"

    lines = _header(title)
    lines.append(
        f'<path d="M{MARGIN},{MARGIN} V{HEIGHT - MARGIN} H{WIDTH - MARGIN}" '
        'stroke="black" fill="none"/>'
    )
    for k, (name, curve) in enumerate(curves.items()):
        points = [xy(0.0, 1.0)]
        level = 1.0
        for t, s in zip(curve.times, curve.survival):
            points.append(xy(t, level))
            points.append(xy(t, s))
            level = s
        color = PALETTE[k % len(PALETTE)]
        lines.append(
            f'<polyline data-group="{escape(name)}" points="{" ".join(points)}" '
            f'stroke="{color}" fill="none"/>'
        )
        lines.append(
            f'<text x="{WIDTH - MARGIN - 60}" y="{MARGIN + 14 * (k + 1)}" '
            f'fill="{color}" font-size="12">{escape(name)}</text>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def attention_svg(amap: AttentionMap, title: str = "Attention") -> str:
    """A circle per patch at its coordinates, darker for higher percentile

    Patches without coordinates are laid out on a row by patch id.
    """
    coords = amap.coords.copy()
    missing = ~np.isfinite(coords).all(axis=1)
    coords[missing] = np.column_stack(
        [amap.patch_ids[missing], np.zeros(missing.sum())]
    )
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = MARGIN + (coords - lo) / span * [WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN]

    lines = _header(title)
    for pid, (x, y), pct in zip(amap.patch_ids, scaled, amap.percentile):
        red = int(round(255 * pct))
        lines.append(
            f'<circle data-patch="{int(pid)}" cx="{_num(x)}" cy="{_num(y)}" r="5" '
            f'fill="rgb({red},0,{255 - red})"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
