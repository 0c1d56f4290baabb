"""Dependency-free SVG line charts for HAM, area, difference and interpolated plots.

Output is a pure function of the inputs: coordinates are printed with fixed
precision and elements are emitted in call order, so rendering the same
traces twice yields identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from html import escape
from typing import Sequence

import numpy as np

from . import analytics as an
from .trace import Trace, area_curves, unique_labels

CAUSAL_RGB = (31, 119, 180)
ANTICAUSAL_RGB = (214, 39, 40)
NEUTRAL_RGB = (90, 90, 90)
PLOT_KINDS = ("ham", "areas", "diff", "interp", "layerwise")


def shade(rgb: tuple[int, int, int], index: int, count: int) -> str:
    """Color for item ``index`` of ``count``: tinted toward white first, toward black last."""
    t = index / (count - 1) if count > 1 else 0.5
    if t < 0.5:
        f = 0.55 * (1 - 2 * t)
        mixed = [c + (255 - c) * f for c in rgb]
    else:
        f = 0.4 * (2 * t - 1)
        mixed = [c * (1 - f) for c in rgb]
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in mixed)


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    mag = abs(v)
    if mag >= 1e4 or mag < 1e-3:
        return f"{v:.2e}"
    return f"{v:.4g}"


@dataclass
class Chart:
    title: str
    xlabel: str = ""
    ylabel: str = ""
    width: int = 640
    height: int = 360
    margin: tuple[int, int, int, int] = (36, 150, 48, 72)  # top, right, bottom, left
    legend: list[tuple[str, str, bool]] = field(default_factory=list)
    xs: list[float] = field(default_factory=list)
    ys: list[float] = field(default_factory=list)
    _pending: list = field(default_factory=list)
    yrange: tuple[float, float] | None = None

    def line(self, x, y, color: str, label: str | None = None, dashed: bool = False, width: float = 1.6):
        x, y = np.asarray(x, float), np.asarray(y, float)
        self.xs.extend(x.tolist())
        self.ys.extend(y.tolist())
        self._pending.append(("line", x, y, color, dashed, width))
        if label:
            self.legend.append((label, color, dashed))

    def marker(self, x: float, y: float, color: str, label: str | None = None):
        self.xs.append(float(x))
        self.ys.append(float(y))
        self._pending.append(("marker", x, y, color))
        if label:
            self.legend.append((label, color, False))

    def _bounds(self):
        x0, x1 = (min(self.xs), max(self.xs)) if self.xs else (0.0, 1.0)
        if self.yrange is not None:
            y0, y1 = self.yrange
        else:
            y0, y1 = (min(self.ys), max(self.ys)) if self.ys else (0.0, 1.0)
            pad = 0.05 * (y1 - y0) if y1 > y0 else 1.0
            y0, y1 = y0 - pad, y1 + pad
        if x1 == x0:
            x1 = x0 + 1.0
        return x0, x1, y0, y1

    def render(self) -> str:
        top, right, bottom, left = self.margin
        pw, ph = self.width - left - right, self.height - top - bottom
        x0, x1, y0, y1 = self._bounds()

        def px(x):
            return left + (x - x0) / (x1 - x0) * pw

        def py(y):
            return top + (1.0 - (y - y0) / (y1 - y0)) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{self.width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(self.title)}</text>',
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        ]
        for v in np.linspace(x0, x1, 6):
            out.append(f'<line x1="{_fmt(px(v))}" y1="{top + ph}" x2="{_fmt(px(v))}" y2="{top + ph + 4}" stroke="#444"/>')
            out.append(f'<text x="{_fmt(px(v))}" y="{top + ph + 16}" text-anchor="middle">{_tick_label(v)}</text>')
        for v in np.linspace(y0, y1, 6):
            out.append(f'<line x1="{left - 4}" y1="{_fmt(py(v))}" x2="{left}" y2="{_fmt(py(v))}" stroke="#444"/>')
            out.append(f'<text x="{left - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{_tick_label(v)}</text>')
        if self.xlabel:
            out.append(f'<text x="{left + pw / 2:.1f}" y="{self.height - 10}" text-anchor="middle">{escape(self.xlabel)}</text>')
        if self.ylabel:
            cy = top + ph / 2
            out.append(f'<text x="14" y="{cy:.1f}" text-anchor="middle" transform="rotate(-90 14 {cy:.1f})">'
                       f'{escape(self.ylabel)}</text>')
        for item in self._pending:
            if item[0] == "line":
                _, x, y, color, dashed, width = item
                pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
                dash = ' stroke-dasharray="5,4"' if dashed else ""
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{dash}/>')
            else:
                _, x, y, color = item
                out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="4" fill="{color}" stroke="black"/>')
        lx = self.width - right + 10
        for i, (label, color, dashed) in enumerate(self.legend):
            ly = top + 8 + 15 * i
            dash = ' stroke-dasharray="5,4"' if dashed else ""
            out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>')
            out.append(f'<text x="{lx + 22}" y="{ly + 4}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def _labels(traces: Sequence[Trace]) -> list[str]:
    return unique_labels(list(traces))


def render_ham(traces: Sequence[Trace], layer: str | None = None, title: str | None = None) -> str:
    """Both mode curves, their lines of proportionality and the equivariant point per trace."""
    n = len(traces)
    chart = Chart(title or ("HAM" + (f" [{layer}]" if layer else "")), "cut h", "gradient norm average")
    for i, (tr, lab) in enumerate(zip(traces, _labels(traces))):
        x = np.arange(tr.horizon + 1)
        for mode, rgb in (("causal", CAUSAL_RGB), ("anticausal", ANTICAUSAL_RGB)):
            if mode not in tr.curves:
                continue
            curve = tr.curve(mode, layer)
            color = shade(rgb, i, n)
            chart.line(x, curve.overall, color, f"{lab} {mode}")
            chart.line(x, an.proportionality_line(curve, mode).values(), color, dashed=True, width=1.0)
        if not tr.partial:
            eq = an.equivariant_point(tr.curve("causal", layer), tr.curve("anticausal", layer))
            if eq.found:
                chart.marker(eq.t, eq.value, shade(NEUTRAL_RGB, i, n))
    return chart.render()


def render_areas(traces: Sequence[Trace], layer: str | None = None) -> str:
    n = len(traces)
    chart = Chart("Area curves", "cut h", "signed area")
    for i, (tr, lab) in enumerate(zip(traces, _labels(traces))):
        x = np.arange(tr.horizon + 1)
        areas = area_curves(tr, layer)
        for mode, rgb in (("causal", CAUSAL_RGB), ("anticausal", ANTICAUSAL_RGB)):
            if mode in areas:
                chart.line(x, areas[mode].values, shade(rgb, i, n), f"{lab} {mode}")
    H = max(t.horizon for t in traces)
    chart.line([0, H], [0, 0], "#999999", dashed=True, width=0.8)
    return chart.render()


def render_diff(traces: Sequence[Trace], layer: str | None = None) -> str:
    """Difference curves in [-1, 1]; equivariant points sit on the y = -1 line."""
    n = len(traces)
    chart = Chart("Difference plot", "t", "d(t)", yrange=(-1.1, 1.1))
    for i, (tr, lab) in enumerate(zip(traces, _labels(traces))):
        if tr.partial:
            raise ValueError(f"difference plot needs both modes; trace {lab!r} is partial")
        diff = an.difference_curve(tr.curve("causal", layer), tr.curve("anticausal", layer))
        color = shade(NEUTRAL_RGB if n > 1 else CAUSAL_RGB, i, n)
        chart.line(np.arange(tr.horizon + 1), diff.values, color, lab)
        if diff.equivariant.found:
            chart.marker(diff.equivariant.t, -1.0, color)
    H = max(t.horizon for t in traces)
    chart.line([0, H], [0, 0], "#999999", dashed=True, width=0.8)
    return chart.render()


def render_interp(traces: Sequence[Trace], grid_size: int = 201) -> str:
    if len(traces) < 2:
        raise ValueError("interpolated area plot needs at least 2 traces")
    labels = _labels(traces)
    plot = an.interpolated_area_plot({lab: area_curves(t) for lab, t in zip(labels, traces)}, grid_size)
    chart = Chart("Interpolated area plot", "h / H", "A / max|A|", yrange=(-1.1, 1.1))
    idx = {lab: i for i, lab in enumerate(labels)}
    for s in plot.series:
        rgb = CAUSAL_RGB if s.mode == "causal" else ANTICAUSAL_RGB
        chart.line(plot.grid, s.grid_y, shade(rgb, idx[s.label], len(labels)), f"{s.label} {s.mode}")
    return chart.render()


def render_layerwise(trace: Trace, mode: str = "causal") -> str:
    curve = trace.curve(mode)
    names = sorted(curve.per_layer)
    if not names:
        raise ValueError("trace has no per-layer curves (compute it with --layerwise)")
    rgb = CAUSAL_RGB if mode == "causal" else ANTICAUSAL_RGB
    chart = Chart(f"Layer-wise HAM ({mode})", "cut h", "gradient norm average")
    x = np.arange(trace.horizon + 1)
    for i, name in enumerate(names):
        chart.line(x, curve.per_layer[name], shade(rgb, i, len(names)), name)
    return chart.render()


def render(kind: str, traces: Sequence[Trace], layer: str | None = None, mode: str = "causal") -> str:
    if not traces:
        raise ValueError("render needs at least one trace")
    if kind == "ham":
        return render_ham(traces, layer)
    if kind == "areas":
        return render_areas(traces, layer)
    if kind == "diff":
        return render_diff(traces, layer)
    if kind == "interp":
        return render_interp(traces)
    if kind == "layerwise":
        return "".join(render_layerwise(t, mode) for t in traces[:1])
    raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
