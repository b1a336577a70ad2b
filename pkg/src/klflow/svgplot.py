"""Dependency-free SVG line charts.

Just enough plotting for convergence curves: polyline series on linear or
log axes, optional shaded stderr bands, tick labels, and a legend. The
output is a single self-contained SVG file.
"""

from __future__ import annotations

import math

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
]

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 20, "top": 40, "bottom": 50}


class Series:
    """One plotted curve: x/y arrays, optional symmetric error band."""

    def __init__(self, label, x, y, yerr=None):
        self.label = label
        self.x = [float(v) for v in x]
        self.y = [float(v) for v in y]
        self.yerr = None if yerr is None else [float(v) for v in yerr]
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal length")
        if self.yerr is not None and len(self.yerr) != len(self.y):
            raise ValueError("yerr must match y length")


def _ticks(lo, hi, log):
    if log:
        lo_e = math.floor(math.log10(lo))
        hi_e = math.ceil(math.log10(hi))
        return [10.0**e for e in range(lo_e, hi_e + 1)]
    span = hi - lo
    if span <= 0:
        return [lo]
    step = 10 ** math.floor(math.log10(span))
    if span / step > 5:
        step *= 2
    elif span / step < 2.5:
        step /= 2
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * abs(hi):
        out.append(t)
        t += step
    return out


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:g}"


class _Axis:
    def __init__(self, values, log, pix_lo, pix_hi):
        vals = [v for v in values if not log or v > 0]
        if not vals:
            raise ValueError("no plottable values (log axis needs positives)")
        self.log = log
        lo, hi = min(vals), max(vals)
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
            if log:
                lo = max(lo, hi / 10.0)
        self.lo, self.hi = lo, hi
        self.pix_lo, self.pix_hi = pix_lo, pix_hi

    def scale(self, v):
        if self.log:
            if v <= 0:
                return None
            f = (math.log10(v) - math.log10(self.lo)) / (math.log10(self.hi) - math.log10(self.lo))
        else:
            f = (v - self.lo) / (self.hi - self.lo)
        return self.pix_lo + f * (self.pix_hi - self.pix_lo)

    def ticks(self):
        return [t for t in _ticks(self.lo, self.hi, self.log) if self.lo <= t <= self.hi or self.log]


def line_chart(series, path, title="", xlabel="", ylabel="", logx=False, logy=False):
    """Write an SVG polyline chart for a list of Series."""
    if not series:
        raise ValueError("need at least one series")
    xs = [v for s in series for v in s.x]
    ys = [v for s in series for v in s.y]
    if logy:
        ys = [v for v in ys if v > 0]
    x_axis = _Axis(xs, logx, MARGIN["left"], WIDTH - MARGIN["right"])
    y_axis = _Axis(ys, logy, HEIGHT - MARGIN["bottom"], MARGIN["top"])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="15">{title}</text>')

    # axes frame
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for t in x_axis.ticks():
        px = x_axis.scale(t)
        if px is None or not x0 - 1 <= px <= x1 + 1:
            continue
        parts.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 5}" stroke="black"/>')
        parts.append(f'<text x="{px:.1f}" y="{y0 + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in y_axis.ticks():
        py = y_axis.scale(t)
        if py is None or not y1 - 1 <= py <= y0 + 1:
            continue
        parts.append(f'<line x1="{x0 - 5}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{py + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
        parts.append(
            f'<line x1="{x0}" y1="{py:.1f}" x2="{x1}" y2="{py:.1f}" stroke="#dddddd" stroke-width="0.5"/>'
        )
    if xlabel:
        parts.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 10}" text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(
            f'<text x="18" y="{(y0 + y1) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 18 {(y0 + y1) / 2})">{ylabel}</text>'
        )

    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(x_axis.scale(x), y_axis.scale(y)) for x, y in zip(s.x, s.y)]
        pts = [(px, py) for px, py in pts if px is not None and py is not None]
        if s.yerr is not None:
            upper, lower = [], []
            for x, y, e in zip(s.x, s.y, s.yerr):
                px = x_axis.scale(x)
                pu = y_axis.scale(y + e)
                pl = y_axis.scale(max(y - e, y_axis.lo / 10.0) if logy else y - e)
                if px is not None and pu is not None and pl is not None:
                    upper.append((px, pu))
                    lower.append((px, pl))
            if upper:
                band = upper + lower[::-1]
                d = " ".join(f"{px:.1f},{py:.1f}" for px, py in band)
                parts.append(f'<polygon points="{d}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        if pts:
            d = " ".join(f"{px:.1f},{py:.1f}" for px, py in pts)
            parts.append(
                f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.8"/>'
            )
        # legend entry
        ly = MARGIN["top"] + 16 * i
        lx = x1 - 150
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly + 4}">{s.label}</text>')

    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
    return path
