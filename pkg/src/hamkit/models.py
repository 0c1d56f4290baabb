"""Desk-scale forecasting models built on :mod:`hamkit.autodiff`.

Four kinds share one interface:

* ``linear``  - channel-independent ``H x L`` map plus bias.
* ``nlinear`` - the same map applied to the window minus its last timestep,
  with the last timestep added back (``normalize=False`` gives the ablation).
* ``mlp``     - channel-flattened MLP with ReLU and inverted dropout after
  every hidden layer.
* ``cycle``   - learnable per-phase queue of length ``|Q|`` removed from the
  input and restored on the output, around a residual linear head.

Layer names (stable, used by layer-wise HAM and trace files)::

    linear / nlinear : linear.weight (H, L), linear.bias (H,)
    mlp              : mlp.{i}.weight (in, out), mlp.{i}.bias (out,)
    cycle            : linear.weight, linear.bias, cycle.queue (|Q|, C)

Checkpoint files are JSON::

    {"format": "hamkit-checkpoint", "version": 1, "epoch": int | null,
     "config": {...ModelConfig fields...},
     "params": {name: {"shape": [...], "data": [flat row-major floats]}}}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tape, Tensor

KINDS = ("linear", "nlinear", "mlp", "cycle")
CHECKPOINT_FORMAT = "hamkit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    lookback: int
    horizon: int
    channels: int = 1
    hidden: tuple[int, ...] = ()
    dropout: float = 0.0
    cycle_length: int | None = None
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("lookback", "horizon", "channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kind == "cycle" and (self.cycle_length is None or self.cycle_length < 1):
            raise ValueError(f"cycle kind requires cycle_length >= 1, got {self.cycle_length}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ForecastModel:
    config: ModelConfig
    params: dict[str, ParamGroup] = field(default_factory=dict)

    def param_groups(self) -> list[ParamGroup]:
        return list(self.params.values())

    def layer_names(self) -> list[str]:
        return list(self.params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> ForecastModel:
        return ForecastModel(self.config, {n: ParamGroup(n, p.value.copy()) for n, p in self.params.items()})

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_snapshot(self, values: dict[str, np.ndarray]) -> None:
        for name, group in self.params.items():
            v = np.asarray(values[name], dtype=ad.DTYPE)
            if v.shape != group.value.shape:
                raise ValueError(f"snapshot {name!r}: shape {v.shape} != {group.value.shape}")
            group.value = v.copy()
            group.zero_grad()

    def forward(self, window, train_mode: bool = False, step_index=0,
                rng: np.random.Generator | None = None, tape: Tape | None = None) -> Tensor:
        return forecast(self, window, train_mode, step_index, rng=rng, tape=tape)

    def predict(self, window, step_index=0) -> np.ndarray:
        return forecast(self, window, False, step_index).data


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: ModelConfig) -> ForecastModel:
    """Deterministically initialize a model from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    L, H, C = config.lookback, config.horizon, config.channels
    groups: list[ParamGroup] = []
    if config.kind in ("linear", "nlinear", "cycle"):
        groups.append(ParamGroup("linear.weight", _uniform(rng, L, (H, L))))
        groups.append(ParamGroup("linear.bias", np.zeros(H)))
        if config.kind == "cycle":
            groups.append(ParamGroup("cycle.queue", np.zeros((config.cycle_length, C))))
    else:
        sizes = [L * C, *config.hidden, H * C]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            groups.append(ParamGroup(f"mlp.{i}.weight", _uniform(rng, fan_in, (fan_in, fan_out))))
            groups.append(ParamGroup(f"mlp.{i}.bias", np.zeros(fan_out)))
    return ForecastModel(config, {g.name: g for g in groups})


def param_groups(model: ForecastModel) -> list[str]:
    return model.layer_names()


def _linear_head(tape: Tape, model: ForecastModel, x: Tensor) -> Tensor:
    w = tape.param(model.params["linear.weight"])
    b = tape.param(model.params["linear.bias"])
    y = ad.matmul(w, x)  # (H, L) @ (..., L, C) -> (..., H, C)
    return ad.add(y, ad.reshape(b, (model.config.horizon, 1)))


def forecast(model: ForecastModel, window, train_mode: bool = False, step_index=0,
             rng: np.random.Generator | None = None, tape: Tape | None = None) -> Tensor:
    """Forecast ``H x C`` values from an ``L x C`` window (or a ``B x L x C`` batch).

    ``step_index`` is the absolute series position of the window's first row
    (one integer, or one per batch row); only the cycle model uses it. Dropout
    masks are drawn from ``rng`` in train mode, defaulting to a generator
    seeded from the config.
    """
    cfg = model.config
    tape = tape if tape is not None else Tape()
    x = window if isinstance(window, Tensor) else tape.constant(window)
    if x.shape[-2:] != (cfg.lookback, cfg.channels) or x.data.ndim not in (2, 3):
        raise ad.ShapeError(
            f"forecast: expected window shape ({cfg.lookback}, {cfg.channels}) or batch thereof, got {x.shape}"
        )
    batched = x.data.ndim == 3
    steps = np.asarray(step_index, dtype=np.int64)
    if np.any(steps < 0):
        raise ValueError(f"forecast: step_index must be nonnegative, got {step_index}")

    if cfg.kind == "linear":
        return _linear_head(tape, model, x)

    if cfg.kind == "nlinear":
        if not cfg.normalize:
            return _linear_head(tape, model, x)
        last = ad.gather_cyclic(x, [cfg.lookback - 1], axis=-2)
        return ad.add(_linear_head(tape, model, ad.broadcast_sub_last(x)), last)

    if cfg.kind == "cycle":
        queue = tape.param(model.params["cycle.queue"])
        if batched:
            starts = np.broadcast_to(steps, (x.shape[0],)).reshape(-1, 1)
        else:
            starts = steps.reshape(())
        in_idx = starts + np.arange(cfg.lookback)
        out_idx = starts + cfg.lookback + np.arange(cfg.horizon)
        resid = ad.sub(x, ad.gather_cyclic(queue, in_idx, axis=0))
        return ad.add(_linear_head(tape, model, resid), ad.gather_cyclic(queue, out_idx, axis=0))

    # mlp
    lead = (x.shape[0],) if batched else (1,)
    h = ad.reshape(x, lead + (cfg.lookback * cfg.channels,))
    n_layers = len(cfg.hidden) + 1
    if train_mode and cfg.dropout > 0 and rng is None:
        rng = np.random.default_rng(cfg.seed)
    for i in range(n_layers):
        w = tape.param(model.params[f"mlp.{i}.weight"])
        b = tape.param(model.params[f"mlp.{i}.bias"])
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = ad.relu(h)
            if train_mode and cfg.dropout > 0:
                mask = rng.random(h.shape) >= cfg.dropout
                h = ad.dropout_masked(h, mask, cfg.dropout)
    out_shape = ((x.shape[0],) if batched else ()) + (cfg.horizon, cfg.channels)
    return ad.reshape(h, out_shape)


# -- checkpoints ----------------------------------------------------------------


def checkpoint_dict(model: ForecastModel, epoch: int | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": model.config.to_dict(),
        "params": {
            n: {"shape": list(p.value.shape), "data": p.value.ravel().tolist()}
            for n, p in model.params.items()
        },
    }


def model_from_checkpoint(doc: dict) -> ForecastModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint: format={doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    model = init_model(ModelConfig.from_dict(doc["config"]))
    values = {}
    for name in model.params:
        if name not in doc["params"]:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        entry = doc["params"][name]
        values[name] = np.asarray(entry["data"], dtype=ad.DTYPE).reshape(entry["shape"])
    model.load_snapshot(values)
    return model


def save_checkpoint(model: ForecastModel, path, epoch: int | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, epoch), sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> ForecastModel:
    return model_from_checkpoint(json.loads(Path(path).read_text()))
