"""Tiny static SVG line-plot writer (no display or plotting dependency).

Output is deterministic: coordinates are formatted with fixed precision so
identical data produces identical bytes.
"""

from __future__ import annotations

import math

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks or [lo, hi]


def line_plot(path, series, title="", xlabel="", ylabel="",
              width=680, height=440) -> None:
    """Write a multi-series line plot.

    ``series`` is a list of ``(x_values, y_values, label)`` tuples.
    """
    margin_l, margin_r, margin_t, margin_b = 62, 16, 28, 46
    pw = width - margin_l - margin_r
    ph = height - margin_t - margin_b

    xs = [float(v) for x, _, _ in series for v in x]
    ys = [float(v) for _, y, _ in series for v in y]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_pad = 0.05 * (y_hi - y_lo)
    y_lo -= y_pad
    y_hi += y_pad

    def px(v):
        return margin_l + (float(v) - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return margin_t + (1.0 - (float(v) - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    # axes box
    out.append(f'<rect x="{margin_l}" y="{margin_t}" width="{pw}" height="{ph}" '
               'fill="none" stroke="#444444" stroke-width="1"/>')
    for t in _nice_ticks(x_lo, x_hi):
        if x_lo <= t <= x_hi:
            x = px(t)
            out.append(f'<line x1="{x:.2f}" y1="{margin_t + ph}" x2="{x:.2f}" '
                       f'y2="{margin_t + ph + 4}" stroke="#444444"/>')
            out.append(f'<text x="{x:.2f}" y="{margin_t + ph + 17}" '
                       f'font-size="11" text-anchor="middle">{t:g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        if y_lo <= t <= y_hi:
            y = py(t)
            out.append(f'<line x1="{margin_l - 4}" y1="{y:.2f}" x2="{margin_l}" '
                       f'y2="{y:.2f}" stroke="#444444"/>')
            out.append(f'<text x="{margin_l - 7}" y="{y + 4:.2f}" font-size="11" '
                       f'text-anchor="end">{t:g}</text>')
    for i, (x, y, label) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        if label:
            ly = margin_t + 14 + 15 * i
            out.append(f'<line x1="{margin_l + 8}" y1="{ly - 4}" '
                       f'x2="{margin_l + 28}" y2="{ly - 4}" stroke="{color}" '
                       'stroke-width="1.5"/>')
            out.append(f'<text x="{margin_l + 33}" y="{ly}" '
                       f'font-size="11">{label}</text>')
    if title:
        out.append(f'<text x="{width / 2:.0f}" y="17" font-size="13" '
                   f'text-anchor="middle">{title}</text>')
    if xlabel:
        out.append(f'<text x="{margin_l + pw / 2:.0f}" y="{height - 10}" '
                   f'font-size="12" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{margin_t + ph / 2:.0f}" font-size="12" '
                   f'text-anchor="middle" transform="rotate(-90 14 '
                   f'{margin_t + ph / 2:.0f})">{ylabel}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
