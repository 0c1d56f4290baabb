"""Series frames: CSV ingestion, synthetic generation, splits, scaling, windows."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

TIME_HEADERS = {"date", "time", "timestamp", "datetime"}


class DataError(ValueError):
    """Invalid input data or data-processing request."""


@dataclass(frozen=True)
class SeriesFrame:
    """``T x C`` observations; ``start`` is the absolute row index of row 0."""

    values: np.ndarray
    channels: tuple[str, ...]
    timestamps: tuple[str, ...] | None = None
    start: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be a T x C matrix, got shape {values.shape}")
        if len(self.channels) != values.shape[1]:
            raise DataError(f"{len(self.channels)} channel names for {values.shape[1]} columns")
        if self.timestamps is not None and len(self.timestamps) != values.shape[0]:
            raise DataError(f"{len(self.timestamps)} timestamps for {values.shape[0]} rows")
        if not np.all(np.isfinite(values)):
            raise DataError("values contain NaN or infinite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    def rows(self, lo: int, hi: int) -> SeriesFrame:
        ts = self.timestamps[lo:hi] if self.timestamps is not None else None
        return SeriesFrame(self.values[lo:hi], self.channels, ts, self.start + lo)


def _parse_float(cell: str) -> float:
    v = float(cell)
    if not math.isfinite(v):
        raise ValueError(cell)
    return v


def load_csv(path, forward_fill: bool = False) -> SeriesFrame:
    """Read a header-row CSV whose first column may hold dates.

    The first column is taken as timestamps when its header is one of
    date/time/timestamp/datetime or its first cell is not numeric. Empty cells
    are an error unless ``forward_fill`` is set.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 data rows, got {len(body)}")
    has_time = header[0].strip().lower() in TIME_HEADERS
    if not has_time:
        try:
            float(body[0][0])
        except ValueError:
            has_time = True
    first = 1 if has_time else 0
    channels = [h.strip() for h in header[first:]]
    if not channels:
        raise DataError(f"{path}: no numeric columns")

    values = np.empty((len(body), len(channels)))
    stamps = []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} cells, expected {len(header)}")
        if has_time:
            stamps.append(row[0].strip())
        for j, cell in enumerate(row[first:]):
            cell = cell.strip()
            if cell == "":
                if forward_fill and i > 0:
                    values[i, j] = values[i - 1, j]
                    continue
                raise DataError(f"{path}: missing value at row {line}, column {channels[j]!r}")
            try:
                values[i, j] = _parse_float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} at row {line}, column {channels[j]!r}"
                ) from None
    return SeriesFrame(values, tuple(channels), tuple(stamps) if has_time else None)


def save_csv(frame: SeriesFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = (["date"] if frame.timestamps is not None else []) + list(frame.channels)
        w.writerow(head)
        for i in range(frame.length):
            row = [repr(float(v)) for v in frame.values[i]]
            if frame.timestamps is not None:
                row.insert(0, frame.timestamps[i])
            w.writerow(row)


# -- synthetic series -------------------------------------------------------------


@dataclass(frozen=True)
class SineComponent:
    period: float
    amplitude: float = 1.0
    phase: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    """value(t) = sum(amp * sin(2 pi t / period + phase)) + slope * t + noise."""

    length: int
    channels: int = 1
    components: tuple[tuple[SineComponent, ...], ...] = ()
    slope: float | tuple[float, ...] = 0.0
    noise_std: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        comps = tuple(
            tuple(SineComponent(**c) if isinstance(c, dict) else SineComponent(*c) for c in chan)
            for chan in d.get("components", ())
        )
        slope = d.get("slope", 0.0)
        if isinstance(slope, list):
            slope = tuple(slope)
        return cls(
            length=int(d["length"]),
            channels=int(d.get("channels", 1)),
            components=comps,
            slope=slope,
            noise_std=float(d.get("noise_std", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "channels": self.channels,
            "components": [
                [{"period": c.period, "amplitude": c.amplitude, "phase": c.phase} for c in chan]
                for chan in self.components
            ],
            "slope": list(self.slope) if isinstance(self.slope, tuple) else self.slope,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def synth(config: SynthConfig) -> SeriesFrame:
    if config.length < 2:
        raise DataError(f"synthetic length must be >= 2, got {config.length}")
    if config.channels < 1:
        raise DataError(f"channels must be >= 1, got {config.channels}")
    comps = config.components
    if comps and len(comps) not in (1, config.channels):
        raise DataError(f"components given for {len(comps)} channels, expected 1 or {config.channels}")
    slopes = np.broadcast_to(np.asarray(config.slope, dtype=np.float64), (config.channels,))
    t = np.arange(config.length, dtype=np.float64)
    values = np.zeros((config.length, config.channels))
    for c in range(config.channels):
        chan = comps[c if len(comps) > 1 else 0] if comps else ()
        for comp in chan:
            if comp.period <= 0:
                raise DataError(f"sine period must be positive, got {comp.period}")
            values[:, c] += comp.amplitude * np.sin(2 * np.pi * t / comp.period + comp.phase)
        values[:, c] += slopes[c] * t
    if config.noise_std > 0:
        rng = np.random.default_rng(config.seed)
        values += rng.normal(0.0, config.noise_std, size=values.shape)
    names = tuple(f"ch{c}" for c in range(config.channels))
    return SeriesFrame(values, names)


# -- splits, scaling, windows -----------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r < 0 for r in ratios):
            raise DataError(f"split ratios must be nonnegative, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {sum(ratios)!r}")


def split_bounds(length: int, spec: SplitSpec) -> tuple[int, int]:
    # epsilon guards products like 100 * 0.6 landing just under an integer
    b1 = math.floor(length * spec.train + 1e-9)
    b2 = math.floor(length * (spec.train + spec.val) + 1e-9)
    return b1, b2


def split(frame: SeriesFrame, spec: SplitSpec = SplitSpec()) -> tuple[SeriesFrame, SeriesFrame, SeriesFrame]:
    """Chronological train/val/test split; rounding remainder goes to test."""
    b1, b2 = split_bounds(frame.length, spec)
    parts = (frame.rows(0, b1), frame.rows(b1, b2), frame.rows(b2, frame.length))
    for name, part in zip(("train", "val", "test"), parts):
        if part.length == 0:
            raise DataError(f"{name} split is empty for T={frame.length} and ratios {spec}")
    return parts


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        for name in ("lookback", "horizon", "stride"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1, got {getattr(self, name)}")

    def count(self, length: int) -> int:
        span = self.lookback + self.horizon
        if length < span:
            return 0
        return (length - span) // self.stride + 1


@dataclass(frozen=True)
class WindowSet:
    """Stacked windows: ``inputs`` (N, L, C), ``targets`` (N, H, C), absolute ``starts`` (N,)."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.inputs[idx], self.targets[idx], self.starts[idx])

    def batches(self, batch_size: int) -> Iterator[WindowSet]:
        if batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {batch_size}")
        for lo in range(0, len(self), batch_size):
            yield self.subset(slice(lo, lo + batch_size))


def make_windows(frame: SeriesFrame, spec: WindowSpec) -> WindowSet:
    n = spec.count(frame.length)
    if n == 0:
        raise DataError(
            f"series of length {frame.length} too short for lookback {spec.lookback} + horizon {spec.horizon}"
        )
    span = spec.lookback + spec.horizon
    view = np.lib.stride_tricks.sliding_window_view(frame.values, span, axis=0)[:: spec.stride][:n]
    view = np.moveaxis(view, -1, 1)  # (N, span, C)
    starts = frame.start + spec.stride * np.arange(n)
    return WindowSet(
        np.ascontiguousarray(view[:, : spec.lookback]),
        np.ascontiguousarray(view[:, spec.lookback:]),
        starts.astype(np.int64),
    )


def windows(frame: SeriesFrame, spec: WindowSpec) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    ws = make_windows(frame, spec)
    for i in range(len(ws)):
        yield ws.inputs[i], ws.targets[i]


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    channels: tuple[str, ...] = field(default=())

    @classmethod
    def fit(cls, frame: SeriesFrame) -> Scaler:
        mean = frame.values.mean(axis=0)
        std = frame.values.std(axis=0)  # population (ddof=0)
        const = [frame.channels[i] for i in np.flatnonzero(std <= 0)]
        if const:
            raise DataError(f"cannot standardize constant channel(s): {const}")
        return cls(mean, std, frame.channels)

    def transform(self, frame: SeriesFrame) -> SeriesFrame:
        return SeriesFrame((frame.values - self.mean) / self.std, frame.channels, frame.timestamps, frame.start)

    def inverse(self, frame: SeriesFrame) -> SeriesFrame:
        return SeriesFrame(frame.values * self.std + self.mean, frame.channels, frame.timestamps, frame.start)

    def digest(self) -> str:
        blob = json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def standardize(frames: Sequence[SeriesFrame], scaler: Scaler | None = None) -> tuple[list[SeriesFrame], Scaler]:
    """Scale every frame with statistics fit on ``frames[0]`` (the training split)."""
    scaler = scaler or Scaler.fit(frames[0])
    return [scaler.transform(f) for f in frames], scaler


def select_channel(frame: SeriesFrame, name: str) -> SeriesFrame:
    if name not in frame.channels:
        raise DataError(f"unknown channel {name!r}; available: {', '.join(frame.channels)}")
    j = frame.channels.index(name)
    return SeriesFrame(frame.values[:, j:j + 1], (name,), frame.timestamps, frame.start)
