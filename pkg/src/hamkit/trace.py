"""Trace files: the JSON interchange format for HAM curves and their analytics.

Layout (version 1)::

    {
      "format": "hamkit-trace",
      "version": 1,
      "horizon": H,
      "norm": "l2" | "l1" | "linf",
      "reduction": "mean" | "global",
      "partial": false,             # true when only one mode is present
      "model":   {"id", "kind", "config_digest", "epoch", "batch_size", "config"},
      "dataset": {"split", "window": {"lookback", "horizon", "stride"}, "scaler_digest"},
      "curves":  {"causal":     {"overall": [H+1 floats], "per_layer": {name: [H+1 floats]}},
                  "anticausal": {...}},
      "analytics": {...}            # optional, appended by the areas/diff commands
    }

Files are written with sorted keys and two-space indentation; floats use
their shortest round-trip representation, so write -> read -> write is
byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import analytics as an
from .ham import MODES, NORM_KINDS, REDUCTIONS, HamCurve

TRACE_FORMAT = "hamkit-trace"
TRACE_VERSION = 1
CSV_VERSION = 1


class TraceValidationError(ValueError):
    """A trace document violates the schema or a curve invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


_curve_schema = {
    "type": "object",
    "required": ["overall"],
    "properties": {
        "overall": {"type": "array", "items": {"type": "number"}},
        "per_layer": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "number"}}},
    },
}

TRACE_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "horizon", "norm", "reduction", "curves"],
    "properties": {
        "format": {"const": TRACE_FORMAT},
        "version": {"const": TRACE_VERSION},
        "horizon": {"type": "integer", "minimum": 1},
        "norm": {"enum": list(NORM_KINDS)},
        "reduction": {"enum": list(REDUCTIONS)},
        "partial": {"type": "boolean"},
        "model": {"type": "object"},
        "dataset": {"type": "object"},
        "curves": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "properties": {m: _curve_schema for m in MODES},
        },
        "analytics": {"type": "object"},
    },
}


@dataclass
class Trace:
    horizon: int
    curves: dict[str, HamCurve]
    norm: str = "l2"
    reduction: str = "mean"
    model: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    analytics: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return set(self.curves) != set(MODES)

    @property
    def label(self) -> str:
        return str(self.model.get("id") or self.model.get("kind") or "model")

    def curve(self, mode: str, layer: str | None = None) -> HamCurve:
        if mode not in self.curves:
            raise TraceValidationError(f"$.curves.{mode}", "mode missing from trace")
        c = self.curves[mode]
        return c.layer(layer) if layer else c

    def to_dict(self) -> dict:
        doc = {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "horizon": self.horizon,
            "norm": self.norm,
            "reduction": self.reduction,
            "partial": self.partial,
            "model": self.model,
            "dataset": self.dataset,
            "curves": {
                mode: {
                    "overall": [float(v) for v in c.overall],
                    "per_layer": {n: [float(v) for v in vals] for n, vals in c.per_layer.items()},
                }
                for mode, c in self.curves.items()
            },
        }
        if self.analytics:
            doc["analytics"] = self.analytics
        return doc


def from_curves(curves: dict[str, HamCurve], model: dict | None = None, dataset: dict | None = None,
                layerwise: bool = True) -> Trace:
    first = next(iter(curves.values()))
    meta = first.metadata
    if not layerwise:
        curves = {m: HamCurve(c.mode, c.horizon, c.overall, {}, c.metadata) for m, c in curves.items()}
    model = dict(model or {})
    model.setdefault("batch_size", meta.get("batch_size"))
    return Trace(first.horizon, dict(curves), meta.get("norm", "l2"), meta.get("reduction", "mean"),
                 model, dict(dataset or {}))


def dumps(trace: Trace) -> str:
    return json.dumps(trace.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_trace(trace: Trace, path) -> None:
    Path(path).write_text(dumps(trace))


def _check_series(values, horizon: int, path: str) -> None:
    if len(values) != horizon + 1:
        raise TraceValidationError(path, f"expected {horizon + 1} values (horizon {horizon}), got {len(values)}")
    for i, v in enumerate(values):
        if not math.isfinite(v):
            raise TraceValidationError(f"{path}[{i}]", f"non-finite value {v!r}")
        if v < 0:
            raise TraceValidationError(f"{path}[{i}]", f"negative gradient-norm average {v!r}")


def validate(doc: dict) -> None:
    """Raise :class:`TraceValidationError` with a JSON path when ``doc`` is malformed."""
    validator = jsonschema.Draft202012Validator(TRACE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise TraceValidationError(err.json_path, err.message)
    H = doc["horizon"]
    curves = doc["curves"]
    for mode, c in curves.items():
        _check_series(c["overall"], H, f"$.curves.{mode}.overall")
        for name, vals in c.get("per_layer", {}).items():
            _check_series(vals, H, f"$.curves.{mode}.per_layer.{name}")
    partial = set(curves) != set(MODES)
    if "partial" in doc and doc["partial"] != partial:
        raise TraceValidationError("$.partial", f"flag is {doc['partial']} but modes present are {sorted(curves)}")
    for key, series in doc.get("analytics", {}).get("areas", {}).items():
        if isinstance(series, list) and len(series) != H + 1:
            raise TraceValidationError(f"$.analytics.areas.{key}", f"expected {H + 1} values, got {len(series)}")


def from_dict(doc: dict) -> Trace:
    validate(doc)
    H = doc["horizon"]
    meta = {"norm": doc["norm"], "reduction": doc["reduction"]}
    curves = {
        mode: HamCurve(mode, H, c["overall"], c.get("per_layer", {}), dict(meta))
        for mode, c in doc["curves"].items()
    }
    return Trace(H, curves, doc["norm"], doc["reduction"], doc.get("model", {}), doc.get("dataset", {}),
                 doc.get("analytics", {}))


def read_trace(path) -> Trace:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceValidationError("$", f"invalid JSON: {exc}") from None
    return from_dict(doc)


# -- analytics bundle -------------------------------------------------------------------


def _layer_curve(trace: Trace, mode: str, layer: str | None) -> HamCurve:
    return trace.curve(mode, layer)


def add_areas(trace: Trace, scope: str = "per-mode", layer: str | None = None) -> dict:
    """Compute lines of proportionality and area curves for every present mode."""
    lines, areas, regions = {}, {}, {}
    for mode in trace.curves:
        curve = _layer_curve(trace, mode, layer)
        other = None
        if scope == "global":
            others = [m for m in trace.curves if m != mode]
            if not others:
                raise TraceValidationError("$.curves", "global scope needs both modes")
            other = _layer_curve(trace, others[0], layer)
        line = an.proportionality_line(curve, mode, scope, other)
        area = an.signed_area(curve, line)
        lines[mode] = {"peak": line.peak, "scope": scope}
        areas[mode] = [float(v) for v in area.values]
        regions[mode] = [{"sign": r.sign, "x0": r.x0, "x1": r.x1} for r in area.regions]
    trace.analytics.update({"layer": layer, "lines": lines, "areas": areas, "regions": regions})
    return trace.analytics


def add_difference(trace: Trace, layer: str | None = None) -> dict:
    missing = [m for m in MODES if m not in trace.curves]
    if missing:
        raise TraceValidationError(f"$.curves.{missing[0]}", "difference plot needs both modes")
    c, a = _layer_curve(trace, "causal", layer), _layer_curve(trace, "anticausal", layer)
    diff = an.difference_curve(c, a)
    eq = diff.equivariant
    trace.analytics.update({
        "layer": layer,
        "difference": {"values": [float(v) for v in diff.values], "normalizer": diff.normalizer,
                       "denominator": "max-abs"},
        "equivariant": {"t": eq.t if eq.found else None, "value": eq.value if eq.found else None,
                        "found": eq.found, "crossings": list(eq.crossings), "degenerate": eq.degenerate},
    })
    return trace.analytics


def area_curves(trace: Trace, layer: str | None = None) -> dict[str, an.AreaCurve]:
    return {m: an.signed_area(_layer_curve(trace, m, layer), an.proportionality_line(_layer_curve(trace, m, layer), m))
            for m in trace.curves}


def interpolated(traces: list[Trace], grid_size: int = 201, labels: list[str] | None = None) -> dict:
    if len(traces) < 2:
        raise TraceValidationError("$", "interpolated area plot needs at least 2 traces")
    labels = labels or unique_labels(traces)
    plot = an.interpolated_area_plot({lab: area_curves(t) for lab, t in zip(labels, traces)}, grid_size)
    return {
        "format": "hamkit-interp",
        "version": 1,
        "grid": [float(v) for v in plot.grid],
        "series": [
            {"label": s.label, "mode": s.mode, "x": [float(v) for v in s.x], "y": [float(v) for v in s.y],
             "grid_y": [float(v) for v in s.grid_y], "all_zero": s.all_zero}
            for s in plot.series
        ],
    }


def unique_labels(traces: list[Trace]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for t in traces:
        base = t.label
        if t.model.get("epoch") is not None and len(traces) > 1:
            base = f"{base}@{t.model['epoch']}"
        n = seen.get(base, 0)
        seen[base] = n + 1
        out.append(base if n == 0 else f"{base}#{n}")
    return out


# -- CSV ----------------------------------------------------------------------------


def export_csv(trace: Trace, layer: str | None = None) -> str:
    """One row per cut: h, causal, anticausal, line_c, line_a, A_c, A_a, d.

    The first line is a ``#`` comment naming the version; a partial trace adds a
    note and drops the columns of the missing mode together with ``d``.
    """
    H = trace.horizon
    areas = area_curves(trace, layer)
    cols: dict[str, np.ndarray] = {"h": np.arange(H + 1)}
    present = [m for m in MODES if m in trace.curves]
    suffix = {"causal": "c", "anticausal": "a"}
    for m in present:
        cols[m] = _layer_curve(trace, m, layer).overall
    for m in present:
        cols[f"line_{suffix[m]}"] = areas[m].line.values()
    for m in present:
        cols[f"A_{suffix[m]}"] = areas[m].values
    note = f"# hamkit-csv v{CSV_VERSION}"
    if len(present) == 2:
        cols["d"] = an.difference_curve(_layer_curve(trace, "causal", layer),
                                        _layer_curve(trace, "anticausal", layer)).values
    else:
        missing = [m for m in MODES if m not in present][0]
        note += f"; {missing} mode missing, its columns and d omitted"
    buf = io.StringIO()
    buf.write(note + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(cols))
    for i in range(H + 1):
        w.writerow([str(i)] + [repr(float(v[i])) for k, v in cols.items() if k != "h"])
    return buf.getvalue()


def import_csv(text: str) -> dict[str, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return {k: np.array([float(r[k]) for r in rows]) for k in reader.fieldnames}
