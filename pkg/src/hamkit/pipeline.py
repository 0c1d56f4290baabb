"""End-to-end recipes shared by the CLI and the experiment tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from .ham import REGRESSION_ONLY, HamConfig, Objective, ham_fast, ham_naive, l2_penalty, register_unmaskable_loss
from .models import ForecastModel, ModelConfig, init_model
from .trace import Trace, from_curves
from .training import OptimizerConfig, TrainRun, fit

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataSpec:
    """Where the series comes from and how it is cut into windows."""

    window: D.WindowSpec
    csv_path: str | None = None
    synth: D.SynthConfig | None = None
    forward_fill: bool = False
    channel: str | None = None
    split: D.SplitSpec = D.SplitSpec()
    standardize: bool = True

    def __post_init__(self):
        if (self.csv_path is None) == (self.synth is None):
            raise D.DataError("exactly one of a CSV path or a synthetic config is required")

    def to_dict(self) -> dict:
        return {
            "csv_path": self.csv_path,
            "synth": self.synth.to_dict() if self.synth else None,
            "forward_fill": self.forward_fill,
            "channel": self.channel,
            "split": [self.split.train, self.split.val, self.split.test],
            "window": {"lookback": self.window.lookback, "horizon": self.window.horizon,
                       "stride": self.window.stride},
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DataSpec:
        return cls(
            window=D.WindowSpec(**d["window"]),
            csv_path=d.get("csv_path"),
            synth=D.SynthConfig.from_dict(d["synth"]) if d.get("synth") else None,
            forward_fill=bool(d.get("forward_fill", False)),
            channel=d.get("channel"),
            split=D.SplitSpec(*d.get("split", (0.6, 0.2, 0.2))),
            standardize=bool(d.get("standardize", True)),
        )


@dataclass
class Prepared:
    frames: dict[str, D.SeriesFrame]
    windows: dict[str, D.WindowSet]
    scaler: D.Scaler | None = None

    @property
    def channels(self) -> int:
        return self.frames["train"].num_channels

    def scaler_digest(self) -> str | None:
        return self.scaler.digest() if self.scaler else None


def load_frame(spec: DataSpec) -> D.SeriesFrame:
    frame = D.load_csv(spec.csv_path, spec.forward_fill) if spec.csv_path else D.synth(spec.synth)
    if spec.channel:
        frame = D.select_channel(frame, spec.channel)
    return frame


def prepare(spec: DataSpec) -> Prepared:
    """Split chronologically, scale with train statistics, window each split on its own."""
    parts = D.split(load_frame(spec), spec.split)
    scaler = None
    if spec.standardize:
        parts, scaler = D.standardize(parts)
    frames = dict(zip(SPLITS, parts))
    return Prepared(frames, {k: D.make_windows(f, spec.window) for k, f in frames.items()}, scaler)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 20
    patience: int = 3
    batch_size: int = 32
    extra_epochs: int = 0
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()
    l2: float = 0.0

    def to_dict(self) -> dict:
        o = self.optimizer
        return {"epochs": self.epochs, "patience": self.patience, "batch_size": self.batch_size,
                "extra_epochs": self.extra_epochs, "seed": self.seed, "l2": self.l2,
                "optimizer": {"kind": o.kind, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2,
                              "eps": o.eps, "decay": o.decay}}

    @classmethod
    def from_dict(cls, d: dict) -> TrainSpec:
        d = dict(d)
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        return cls(**d)


def objective_for(l2: float) -> Objective:
    return register_unmaskable_loss(l2_penalty(l2)) if l2 > 0 else REGRESSION_ONLY


def train(model_cfg: ModelConfig, prepared: Prepared, spec: TrainSpec) -> TrainRun:
    model = init_model(model_cfg)
    run = fit(model, prepared.windows["train"], prepared.windows["val"], spec.epochs, spec.patience,
              spec.batch_size, spec.optimizer, spec.seed, spec.extra_epochs, objective_for(spec.l2))
    return run


def ham_trace(model: ForecastModel, prepared: Prepared, split: str = "train", cfg: HamConfig = HamConfig(),
              naive: bool = False, modes=("causal", "anticausal"), layerwise: bool = True,
              epoch: int | None = None, model_id: str | None = None, window: D.WindowSpec | None = None,
              objective: Objective = REGRESSION_ONLY) -> Trace:
    """HAM of ``model`` over one split, packaged as a trace."""
    if split not in prepared.windows:
        raise D.DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    ws = prepared.windows[split]
    if naive:
        curves = ham_naive(model, ws, cfg, modes, objective)
    else:
        curves = {m: c for m, c in ham_fast(model, ws, cfg, objective).items() if m in modes}
    mc = model.config
    model_meta = {"id": model_id or mc.kind, "kind": mc.kind, "config": mc.to_dict(),
                  "config_digest": mc.digest(), "epoch": epoch, "batch_size": cfg.batch_size}
    win = window or D.WindowSpec(mc.lookback, mc.horizon)
    dataset_meta = {"split": split, "windows": len(ws), "scaler_digest": prepared.scaler_digest(),
                    "window": {"lookback": win.lookback, "horizon": win.horizon, "stride": win.stride}}
    trace = from_curves(curves, model_meta, dataset_meta, layerwise)
    trace.model["train_mode"] = cfg.train_mode
    trace.model["route"] = "naive" if naive else "fast"
    return trace


def local_maxima(y: np.ndarray) -> list[int]:
    """Interior indices strictly greater than the left neighbour and at least the right one."""
    y = np.asarray(y)
    return [i for i in range(1, y.size - 1) if y[i] > y[i - 1] and y[i] >= y[i + 1]]
