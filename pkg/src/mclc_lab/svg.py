"""Tiny SVG 1.1 writer for line plots with error bands and bar charts.

Only data series are drawn as ``<polyline>``; bands are ``<polygon>`` and
axes/ticks are ``<line>``, so structural tests can count series directly.
"""

from datetime import datetime, timezone
from xml.sax.saxutils import escape
import math

import numpy as np

__all__ = ["LinePlot", "BarChart"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_HEADER = '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'


def _nice_ticks(lo, hi, n=5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        return []
    if hi == lo:
        return [lo]
    raw = (hi - lo) / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [round(v, 12) for v in np.arange(start, hi + 0.5 * step, step)]


def _fmt(v):
    return f"{v:.6g}"


class _Canvas:
    def __init__(self, width, height, title, xlabel, ylabel):
        self.width, self.height = width, height
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.ml, self.mr, self.mt, self.mb = 64, 16, 32, 48

    def _frame(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        w = self.width - self.ml - self.mr
        return self.ml + (x - self.x0) / (self.x1 - self.x0) * w

    def py(self, y):
        h = self.height - self.mt - self.mb
        return self.height - self.mb - (y - self.y0) / (self.y1 - self.y0) * h

    def _axes(self, xticks=True):
        out = []
        xb, yb = self.height - self.mb, self.ml
        out.append(f'<line class="axis" x1="{yb}" y1="{xb}" x2="{self.width - self.mr}" y2="{xb}" stroke="black"/>')
        out.append(f'<line class="axis" x1="{yb}" y1="{self.mt}" x2="{yb}" y2="{xb}" stroke="black"/>')
        if xticks:
            for v in _nice_ticks(self.x0, self.x1):
                x = self.px(v)
                out.append(f'<line class="tick" x1="{_fmt(x)}" y1="{xb}" x2="{_fmt(x)}" y2="{xb + 4}" stroke="black"/>')
                out.append(f'<text x="{_fmt(x)}" y="{xb + 16}" font-size="10" text-anchor="middle">{_fmt(v)}</text>')
        for v in _nice_ticks(self.y0, self.y1):
            y = self.py(v)
            out.append(f'<line class="tick" x1="{yb - 4}" y1="{_fmt(y)}" x2="{yb}" y2="{_fmt(y)}" stroke="black"/>')
            out.append(f'<text x="{yb - 6}" y="{_fmt(y + 3)}" font-size="10" text-anchor="end">{_fmt(v)}</text>')
        out.append(f'<text x="{self.width / 2}" y="{self.height - 8}" font-size="12" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="14" y="{self.height / 2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 14 {self.height / 2})">{escape(self.ylabel)}</text>')
        if self.title:
            out.append(f'<text x="{self.width / 2}" y="18" font-size="13" text-anchor="middle">{escape(self.title)}</text>')
        return out

    def _wrap(self, body, reproducible):
        head = [_HEADER]
        if not reproducible:
            stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            head.append(f"<!-- generated {stamp} -->\n")
        head.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
        )
        head.append(f'<rect width="{self.width}" height="{self.height}" fill="white"/>\n')
        return "".join(head) + "\n".join(body) + "\n</svg>\n"


class LinePlot(_Canvas):
    """Line plot; each series may carry a symmetric or explicit band."""

    def __init__(self, width=640, height=400, title="", xlabel="", ylabel=""):
        super().__init__(width, height, title, xlabel, ylabel)
        self.series = []

    def add(self, x, y, label="", band=None, color=None):
        """Add a series. ``band`` is ``(lower, upper)`` arrays or ``None``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.ndim != 1 or x.size == 0:
            raise ValueError("x and y must be equal-length non-empty vectors")
        if band is not None:
            band = tuple(np.asarray(b, dtype=float) for b in band)
        color = color or PALETTE[len(self.series) % len(PALETTE)]
        self.series.append((x, y, label, band, color))
        return self

    def render(self, reproducible=False):
        if not self.series:
            raise ValueError("nothing to plot")
        xs = np.concatenate([s[0] for s in self.series])
        ys = [s[1] for s in self.series] + [b for s in self.series if s[3] is not None for b in s[3]]
        ys = np.concatenate(ys)
        ys = ys[np.isfinite(ys)]
        lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
        pad = 0.05 * (hi - lo or 1.0)
        self._frame((float(xs.min()), float(xs.max())), (lo - pad, hi + pad))
        body = self._axes()
        for x, y, label, band, color in self.series:
            if band is not None:
                pts = [(self.px(a), self.py(b)) for a, b in zip(x, band[1])]
                pts += [(self.px(a), self.py(b)) for a, b in zip(x[::-1], band[0][::-1])]
                body.append(f'<polygon points="{" ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)}" '
                            f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        for i, (x, y, label, band, color) in enumerate(self.series):
            pts = " ".join(f"{_fmt(self.px(a))},{_fmt(self.py(b))}" for a, b in zip(x, y))
            body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5">'
                        f"<title>{escape(label)}</title></polyline>")
            ly = self.mt + 14 * (i + 1)
            body.append(f'<text x="{self.width - self.mr - 4}" y="{ly}" font-size="11" text-anchor="end" '
                        f'fill="{color}">{escape(label)}</text>')
        return self._wrap(body, reproducible)

    def save(self, path, reproducible=False):
        with open(path, "w") as fh:
            fh.write(self.render(reproducible))


class BarChart(_Canvas):
    def __init__(self, width=640, height=400, title="", xlabel="", ylabel=""):
        super().__init__(width, height, title, xlabel, ylabel)
        self.bars = []

    def add(self, label, value):
        self.bars.append((str(label), float(value)))
        return self

    def render(self, reproducible=False):
        if not self.bars:
            raise ValueError("nothing to plot")
        vals = [v for _, v in self.bars if math.isfinite(v)]
        top = max(vals + [0.0]) or 1.0
        self._frame((0.0, float(len(self.bars))), (0.0, 1.05 * top))
        body = self._axes(xticks=False)
        slot = self.px(1.0) - self.px(0.0)
        for i, (label, v) in enumerate(self.bars):
            x = self.px(i) + 0.15 * slot
            y = self.py(max(v, 0.0) if math.isfinite(v) else top)
            h = self.py(0.0) - y
            body.append(f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(0.7 * slot)}" '
                        f'height="{_fmt(h)}" fill="{PALETTE[0]}"><title>{escape(label)}: {_fmt(v)}</title></rect>')
            body.append(f'<text x="{_fmt(x + 0.35 * slot)}" y="{self.height - self.mb + 16}" font-size="10" '
                        f'text-anchor="middle">{escape(label)}</text>')
        return self._wrap(body, reproducible)

    def save(self, path, reproducible=False):
        with open(path, "w") as fh:
            fh.write(self.render(reproducible))
