"""Minimal SVG writer for planar polylines and marker points."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def polylines_svg(layers, width: int = 640, margin: float = 0.05, title: str = "") -> str:
    """SVG text for ``layers``: dicts with ``points`` (N, 2) and optional
    ``label``, ``color``, ``markers`` (draw dots instead of a line).

    y points up in the data and is flipped for display.
    """
    pts = [np.asarray(l["points"], float).reshape(-1, 2) for l in layers]
    allp = np.vstack([p for p in pts if len(p)] or [np.zeros((1, 2))])
    allp = allp[np.all(np.isfinite(allp), axis=1)]
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = margin * span.max()
    lo, span = lo - pad, span + 2 * pad
    height = int(round(width * span[1] / span[0])) if span[0] > 0 else width
    height = max(80, min(height, 4 * width))
    sx, sy = width / span[0], height / span[1]

    def tr(p):
        return (p[:, 0] - lo[0]) * sx, height - (p[:, 1] - lo[1]) * sy

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    for k, (layer, p) in enumerate(zip(layers, pts)):
        color = layer.get("color", _PALETTE[k % len(_PALETTE)])
        label = escape(str(layer.get("label", f"layer {k}")))
        p = p[np.all(np.isfinite(p), axis=1)]
        if not len(p):
            continue
        x, y = tr(p)
        out.append(f'<g id="layer{k}"><desc>{label}</desc>')
        if layer.get("markers"):
            for a, b in zip(x, y):
                out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>')
        else:
            coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append("</g>")
        out.append(f'<text x="8" y="{16 + 14 * k}" font-size="12" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
