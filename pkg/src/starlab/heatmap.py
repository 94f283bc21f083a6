"""Self-contained SVG heatmaps of gradient-magnitude fields (log10 color
scale, time on x, layer on y with layer 1 at the bottom). No plotting
dependency; output bytes are deterministic for identical fields.
"""

from __future__ import annotations

import numpy as np

# viridis-like anchor colors, interpolated linearly in RGB
_STOPS = (
    (0.0, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.5, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.0, (253, 231, 37)),
)


def _color(frac: float) -> str:
    frac = min(max(frac, 0.0), 1.0)
    for (f0, c0), (f1, c1) in zip(_STOPS, _STOPS[1:]):
        if frac <= f1:
            w = 0.0 if f1 == f0 else (frac - f0) / (f1 - f0)
            rgb = tuple(round(a + w * (b - a)) for a, b in zip(c0, c1))
            return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"
    return "rgb(253,231,37)"


def field_svg(values: np.ndarray, title: str = "") -> str:
    """Render an (L, T) array of non-negative magnitudes as an SVG heatmap.

    Zeros (no signal recorded) render as the lowest color; the color range
    spans the log10 of the positive values present.
    """
    values = np.asarray(values, dtype=np.float64)
    n_layers, steps = values.shape
    pos = values[values > 0]
    if pos.size:
        lo, hi = np.log10(pos.min()), np.log10(pos.max())
    else:
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        hi = lo + 1e-12

    cell = max(4, min(24, 720 // steps))
    pad_l, pad_t, pad_b = 56, 28 if title else 10, 34
    bar_w, bar_gap = 18, 22
    width = pad_l + steps * cell + bar_gap + bar_w + 54
    height = pad_t + n_layers * cell + pad_b

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{pad_l}" y="18" font-family="monospace" font-size="13">{title}</text>'
        )
    for l in range(n_layers):
        y = pad_t + (n_layers - 1 - l) * cell  # layer 1 at the bottom
        for t in range(steps):
            v = values[l, t]
            frac = 0.0 if v <= 0 else (np.log10(v) - lo) / (hi - lo)
            parts.append(
                f'<rect x="{pad_l + t * cell}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_color(float(frac))}"/>'
            )
    # axis labels
    parts.append(
        f'<text x="{pad_l + steps * cell / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        f'font-family="monospace" font-size="11">time (1..{steps})</text>'
    )
    parts.append(
        f'<text x="14" y="{pad_t + n_layers * cell / 2:.0f}" text-anchor="middle" '
        f'font-family="monospace" font-size="11" '
        f'transform="rotate(-90 14 {pad_t + n_layers * cell / 2:.0f})">layer (1..{n_layers})</text>'
    )
    # color bar with log10 endpoints
    bx = pad_l + steps * cell + bar_gap
    bh = n_layers * cell
    strips = 32
    for s in range(strips):
        frac = 1.0 - (s + 0.5) / strips
        parts.append(
            f'<rect x="{bx}" y="{pad_t + s * bh / strips:.2f}" width="{bar_w}" '
            f'height="{bh / strips + 0.5:.2f}" fill="{_color(frac)}"/>'
        )
    parts.append(
        f'<text x="{bx + bar_w + 4}" y="{pad_t + 10}" font-family="monospace" '
        f'font-size="10">1e{hi:.1f}</text>'
    )
    parts.append(
        f'<text x="{bx + bar_w + 4}" y="{pad_t + bh}" font-family="monospace" '
        f'font-size="10">1e{lo:.1f}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
