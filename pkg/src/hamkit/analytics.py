"""Geometry over HAM curves.

Curves are piecewise linear through the points ``(h, y[h])`` for
``h = 0..H``. Proportionality lines run from 0 to ``G`` (causal) or ``G`` to 0
(anticausal), where ``G`` is the curve maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ham import HamCurve

SCOPES = ("per-mode", "global")


def _values(curve) -> np.ndarray:
    return np.asarray(curve.overall if isinstance(curve, HamCurve) else curve, dtype=np.float64)


@dataclass(frozen=True)
class ProportionalityLine:
    mode: str
    horizon: int
    peak: float

    @property
    def endpoints(self) -> tuple[tuple[float, float], tuple[float, float]]:
        if self.mode == "causal":
            return (0.0, 0.0), (float(self.horizon), self.peak)
        return (0.0, self.peak), (float(self.horizon), 0.0)

    def values(self) -> np.ndarray:
        frac = np.arange(self.horizon + 1) / self.horizon
        return self.peak * (frac if self.mode == "causal" else 1.0 - frac)


def proportionality_line(curve, mode: str | None = None, scope: str = "per-mode",
                         other=None) -> ProportionalityLine:
    """Line of uniformly distributed gradient mass; ``global`` scope also uses ``other``'s max."""
    y = _values(curve)
    if y.size < 2:
        raise ValueError("proportionality_line: curve needs at least 2 points")
    mode = mode or getattr(curve, "mode", None)
    if mode not in ("causal", "anticausal"):
        raise ValueError(f"proportionality_line: unknown mode {mode!r}")
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    peak = float(y.max())
    if scope == "global":
        if other is None:
            raise ValueError("global scope needs the other mode's curve")
        peak = max(peak, float(_values(other).max()))
    return ProportionalityLine(mode, y.size - 1, max(peak, 0.0))


# -- signed areas -------------------------------------------------------------------


def shoelace(points: np.ndarray) -> float:
    """Signed polygon area (counter-clockwise positive) of an ``(n, 2)`` vertex array."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass
class Region:
    """A maximal stretch where the curve is strictly above (+1) or below (-1) the line."""

    sign: int
    x0: float
    x1: float
    curve: np.ndarray  # (n, 2) curve vertices from x0 to x1, crossing points included
    line: np.ndarray   # (n, 2) line points at the same x positions

    def polygon(self, upto: float | None = None) -> np.ndarray:
        """Closed boundary: curve left to right, then the line back; optionally clipped at ``x <= upto``."""
        c, l = self.curve, self.line
        if upto is not None and upto < self.x1:
            keep = c[:, 0] <= upto
            c, l = c[keep], l[keep]
        return np.concatenate([c, l[::-1]])

    def area(self, upto: float | None = None) -> float:
        if upto is not None and upto <= self.x0:
            return 0.0
        return self.sign * abs(shoelace(self.polygon(upto)))


@dataclass
class AreaCurve:
    mode: str
    values: np.ndarray
    regions: list[Region] = field(default_factory=list)
    line: ProportionalityLine | None = None

    @property
    def crossings(self) -> list[float]:
        """x positions where the curve meets the line between regions."""
        xs = sorted({r.x0 for r in self.regions} | {r.x1 for r in self.regions})
        return xs


def _refine(y: np.ndarray, l: np.ndarray) -> np.ndarray:
    """Polyline points ``(x, curve, line, curve - line)`` with strict sign changes split at their crossing."""
    dev = y - l
    pts = []
    for i in range(y.size):
        pts.append((float(i), y[i], l[i], dev[i]))
        if i + 1 < y.size and dev[i] * dev[i + 1] < 0:
            t = dev[i] / (dev[i] - dev[i + 1])
            cy = y[i] + t * (y[i + 1] - y[i])
            pts.append((i + float(t), cy, cy, 0.0))
    return np.array(pts)


def _regions(y: np.ndarray, l: np.ndarray) -> list[Region]:
    pts = _refine(y, l)
    regions: list[Region] = []
    run_start, run_sign = None, 0
    for k in range(len(pts) - 1):
        s = int(np.sign(pts[k, 3] + pts[k + 1, 3]))
        if run_start is not None and (s != run_sign or pts[k, 3] == 0):
            regions.append(_make_region(pts[run_start:k + 1], run_sign))
            run_start, run_sign = None, 0
        if s != 0 and run_start is None:
            run_start, run_sign = k, s
    if run_start is not None:
        regions.append(_make_region(pts[run_start:], run_sign))
    return regions


def _make_region(pts: np.ndarray, sign: int) -> Region:
    return Region(sign, float(pts[0, 0]), float(pts[-1, 0]), pts[:, [0, 1]].copy(), pts[:, [0, 2]].copy())


def signed_area(curve, line: ProportionalityLine | None = None) -> AreaCurve:
    """Cumulative signed area between a curve and its line of proportionality.

    Regions above the line count positive, below negative; each region's area
    comes from the shoelace formula on its boundary polygon. ``A(h)`` sums the
    regions clipped to ``x <= h``.
    """
    y = _values(curve)
    if line is None:
        line = proportionality_line(curve)
    l = line.values()
    if l.size != y.size:
        raise ValueError(f"signed_area: curve has {y.size} points, line expects {l.size}")
    regions = _regions(y, l)
    H = y.size - 1
    values = np.zeros(H + 1)
    done = 0.0
    r = 0
    for h in range(1, H + 1):
        while r < len(regions) and regions[r].x1 <= h:
            done += regions[r].area()
            r += 1
        partial = regions[r].area(upto=h) if r < len(regions) and regions[r].x0 < h else 0.0
        values[h] = done + partial
    return AreaCurve(line.mode, values, regions, line)


def trapezoid_area(curve, line: ProportionalityLine) -> np.ndarray:
    """Cumulative trapezoid integral of (curve - line); the independent check on :func:`signed_area`."""
    dev = _values(curve) - line.values()
    return np.concatenate([[0.0], np.cumsum(0.5 * (dev[:-1] + dev[1:]))])


# -- equivariant points and differences -----------------------------------------------------


@dataclass(frozen=True)
class EquivariantPoint:
    t: float
    value: float
    found: bool
    crossings: tuple[float, ...] = ()
    degenerate: bool = False  # curves coincide on a whole stretch

    @property
    def multiple(self) -> bool:
        return len(self.crossings) > 1


def _interp(y: np.ndarray, t: float) -> float:
    return float(np.interp(t, np.arange(y.size), y))


def equivariant_point(causal, anticausal) -> EquivariantPoint:
    """First cut where the causal and anticausal curves meet, by linear interpolation."""
    c, a = _values(causal), _values(anticausal)
    if c.shape != a.shape:
        raise ValueError(f"curves differ in length: {c.size} vs {a.size}")
    diff = c - a
    crossings: list[float] = []
    degenerate = False
    for i in range(diff.size):
        if diff[i] == 0:
            crossings.append(float(i))
            if i + 1 < diff.size and diff[i + 1] == 0:
                degenerate = True
        elif i + 1 < diff.size and diff[i] * diff[i + 1] < 0:
            crossings.append(i + float(diff[i] / (diff[i] - diff[i + 1])))
    if not crossings:
        return EquivariantPoint(float("nan"), float("nan"), False)
    t = crossings[0]
    return EquivariantPoint(t, _interp(c, t), True, tuple(crossings), degenerate)


@dataclass
class DifferenceCurve:
    values: np.ndarray
    raw: np.ndarray
    normalizer: float
    equivariant: EquivariantPoint


def difference_curve(causal, anticausal) -> DifferenceCurve:
    """``(causal - anticausal) / max|causal - anticausal|``, all zeros when the curves coincide."""
    c, a = _values(causal), _values(anticausal)
    if c.shape != a.shape:
        raise ValueError(f"curves differ in length: {c.size} vs {a.size}")
    raw = c - a
    norm = float(np.abs(raw).max())
    d = raw / norm if norm > 0 else np.zeros_like(raw)
    return DifferenceCurve(d, raw, norm, equivariant_point(c, a))


# -- interpolated area plots ------------------------------------------------------------


@dataclass
class InterpolatedSeries:
    label: str
    mode: str
    x: np.ndarray        # native h / H
    y: np.ndarray        # native A(h) / max|A|
    grid_y: np.ndarray   # y resampled on the shared grid
    all_zero: bool


@dataclass
class InterpolatedAreaPlot:
    grid: np.ndarray
    series: list[InterpolatedSeries]


def normalized_area(area: AreaCurve | Sequence[float]) -> tuple[np.ndarray, np.ndarray, bool]:
    v = np.asarray(area.values if isinstance(area, AreaCurve) else area, dtype=np.float64)
    x = np.arange(v.size) / (v.size - 1)
    peak = float(np.abs(v).max())
    if peak == 0:
        return x, np.zeros_like(v), True
    return x, v / peak, False


def interpolated_area_plot(models: dict[str, dict[str, AreaCurve]], grid_size: int = 201) -> InterpolatedAreaPlot:
    """Max-normalize each (model, mode) area curve and resample on ``[0, 1]``.

    ``models`` maps a label to ``{"causal": AreaCurve, "anticausal": AreaCurve}``
    (either mode may be missing); horizons may differ between models.
    """
    if grid_size < 2:
        raise ValueError(f"grid size must be >= 2, got {grid_size}")
    grid = np.linspace(0.0, 1.0, grid_size)
    series = []
    for label, areas in models.items():
        for mode in ("causal", "anticausal"):
            if mode not in areas:
                continue
            x, y, zero = normalized_area(areas[mode])
            series.append(InterpolatedSeries(label, mode, x, y, np.interp(grid, x, y), zero))
    return InterpolatedAreaPlot(grid, series)
