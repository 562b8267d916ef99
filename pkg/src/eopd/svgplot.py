"""Tiny deterministic SVG charts.

Hand-rolled so plot files are byte-identical across replays; no timestamps,
ids, or library-version metadata end up in the output.
"""

from __future__ import annotations

import math

__all__ = ["line_chart", "bar_chart"]

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 60, 20, 30, 45
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return format(v, ".6g")


def _scale(lo: float, hi: float, pixels: tuple[int, int]):
    span = hi - lo if hi > lo else 1.0
    p0, p1 = pixels

    def to_px(v: float) -> float:
        return p0 + (v - lo) / span * (p1 - p0)

    return to_px


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s for s in (mag, 2 * mag, 5 * mag, 10 * mag) if s >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def _frame(title: str, x_label: str, y_label: str, xt, yt, x_ticks, y_ticks) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:g}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]
    x0, x1 = _MARGIN_L, _WIDTH - _MARGIN_R
    y0, y1 = _HEIGHT - _MARGIN_B, _MARGIN_T
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black" stroke-width="1"/>'
    )
    for v in x_ticks:
        px = xt(v)
        parts.append(f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" stroke="black"/>')
        parts.append(
            f'<text x="{px:.2f}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{_fmt(v)}</text>'
        )
    for v in y_ticks:
        py = yt(v)
        parts.append(f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="black"/>')
        parts.append(
            f'<text x="{x0 - 8}" y="{py + 4:.2f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{_fmt(v)}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) / 2:g}" y="{_HEIGHT - 8}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(y0 + y1) / 2:g}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(y0 + y1) / 2:g})">{y_label}</text>'
    )
    return parts


def line_chart(series, title: str = "", x_label: str = "", y_label: str = "") -> str:
    """Render labelled (xs, ys) series as polylines.

    ``series`` is an iterable of (label, xs, ys) triples.
    """
    series = [(str(lab), list(xs), list(ys)) for lab, xs, ys in series]
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(min(ys_all), 0.0), max(ys_all)
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    xt = _scale(x_lo, x_hi, (_MARGIN_L, _WIDTH - _MARGIN_R))
    yt = _scale(y_lo, y_hi, (_HEIGHT - _MARGIN_B, _MARGIN_T))
    parts = _frame(title, x_label, y_label, xt, yt, _ticks(x_lo, x_hi), _ticks(y_lo, y_hi))
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{xt(x):.2f},{yt(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _MARGIN_T + 14 * (i + 1)
        parts.append(
            f'<line x1="{_WIDTH - 150}" y1="{ly - 4}" x2="{_WIDTH - 130}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_WIDTH - 125}" y="{ly}" font-size="11" font-family="sans-serif">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels, values, title: str = "", x_label: str = "", y_label: str = "") -> str:
    """Render one bar per (label, value) pair."""
    labels = [str(l) for l in labels]
    values = [float(v) for v in values]
    y_hi = max(values + [1e-12])
    xt = _scale(0, len(values), (_MARGIN_L, _WIDTH - _MARGIN_R))
    yt = _scale(0.0, y_hi, (_HEIGHT - _MARGIN_B, _MARGIN_T))
    parts = _frame(title, x_label, y_label, xt, yt, [], _ticks(0.0, y_hi))
    y0 = _HEIGHT - _MARGIN_B
    for i, (label, v) in enumerate(zip(labels, values)):
        x_left = xt(i + 0.1)
        width = xt(i + 0.9) - x_left
        top = yt(v)
        parts.append(
            f'<rect x="{x_left:.2f}" y="{top:.2f}" width="{width:.2f}" '
            f'height="{y0 - top:.2f}" fill="{_COLORS[0]}"/>'
        )
        if len(values) <= 20 or i % max(1, len(values) // 20) == 0:
            cx = xt(i + 0.5)
            parts.append(
                f'<text x="{cx:.2f}" y="{y0 + 18}" text-anchor="middle" font-size="10" '
                f'font-family="sans-serif">{label}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
