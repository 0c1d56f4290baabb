"""Mini training loop: SGD/Adam, early stopping and per-epoch checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tape
from .data import WindowSet
from .ham import REGRESSION_ONLY, Objective, full_loss
from .models import ForecastModel, checkpoint_dict, model_from_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0  # multiplicative learning-rate factor applied after every epoch

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'sgd' or 'adam'")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        for b in (self.beta1, self.beta2):
            if not 0 <= b < 1:
                raise ValueError(f"adam betas must lie in [0, 1), got {b}")
        if self.decay <= 0:
            raise ValueError(f"decay factor must be positive, got {self.decay}")


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.lr = config.lr
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[ParamGroup]) -> None:
        cfg = self.config
        self.t += 1
        for p in params:
            if cfg.kind == "sgd":
                p.value = p.value - self.lr * p.grad
                continue
            m = self._m.get(p.name, np.zeros_like(p.value))
            v = self._v.get(p.name, np.zeros_like(p.value))
            m = cfg.beta1 * m + (1 - cfg.beta1) * p.grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * p.grad * p.grad
            self._m[p.name], self._v[p.name] = m, v
            m_hat = m / (1 - cfg.beta1 ** self.t)
            v_hat = v / (1 - cfg.beta2 ** self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def end_epoch(self) -> None:
        self.lr *= self.config.decay


def train_epoch(model: ForecastModel, windows: WindowSet, batch_size: int, optimizer: Optimizer,
                seed: int = 0, epoch: int = 1, objective: Objective = REGRESSION_ONLY) -> float:
    """One pass over shuffled windows; returns the size-weighted mean batch loss."""
    if len(windows) == 0:
        raise ValueError("train_epoch: no training windows")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(windows))
    groups = model.param_groups()
    total = 0.0
    for b, lo in enumerate(range(0, len(windows), batch_size)):
        batch = windows.subset(order[lo:lo + batch_size])
        tape = Tape()
        pred = model.forward(batch.inputs, train_mode=True, step_index=batch.starts,
                             rng=np.random.default_rng([seed, epoch, b]), tape=tape)
        loss = full_loss(model, tape, pred, batch.targets, objective)
        ad.backward(loss, groups)
        optimizer.step(groups)
        total += float(loss.data.ravel()[0]) * len(batch)
    optimizer.end_epoch()
    return total / len(windows)


def evaluate(model: ForecastModel, windows: WindowSet, batch_size: int = 4096) -> dict[str, float]:
    """MSE and MAE over all windows with dropout disabled."""
    if len(windows) == 0:
        return {"mse": float("nan"), "mae": float("nan")}
    sq = ab = 0.0
    for batch in windows.batches(batch_size):
        err = model.forward(batch.inputs, train_mode=False, step_index=batch.starts).data - batch.targets
        sq += float(np.sum(err * err))
        ab += float(np.sum(np.abs(err)))
    n = windows.targets.size
    return {"mse": sq / n, "mae": ab / n}


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch: int | None = None
        self.bad = 0
        self.stop_epoch: int | None = None

    def update(self, epoch: int, val_loss: float) -> bool:
        if self.stop_epoch is not None:
            return True
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, epoch, 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.stop_epoch = epoch
        return self.stop_epoch is not None


@dataclass
class TrainRun:
    """Index ``i`` of every list refers to epoch ``i``; epoch 0 is the initialized model."""

    model: ForecastModel
    checkpoints: list[dict[str, np.ndarray]] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    stop_epoch: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.checkpoints) - 1

    def model_at(self, epoch: int) -> ForecastModel:
        m = self.model.clone()
        m.load_snapshot(self.checkpoints[epoch])
        return m


def fit(model: ForecastModel, train: WindowSet, val: WindowSet, epochs: int, patience: int = 3,
        batch_size: int = 32, optimizer: OptimizerConfig = OptimizerConfig(), seed: int = 0,
        extra_epochs: int = 0, objective: Objective = REGRESSION_ONLY) -> TrainRun:
    """Train with early stopping, checkpointing every epoch.

    After the stop triggers, ``extra_epochs`` further epochs are trained and
    checkpointed. Training ends at ``epochs`` if early stopping never fires.
    """
    stopper = EarlyStopping(patience)
    opt = Optimizer(optimizer)
    run = TrainRun(model)
    run.checkpoints.append(model.snapshot())
    run.train_losses.append(evaluate(model, train)["mse"])
    run.val_losses.append(evaluate(model, val)["mse"])
    remaining = None
    for epoch in range(1, epochs + 1):
        train_loss = train_epoch(model, train, batch_size, opt, seed, epoch, objective)
        val_loss = evaluate(model, val)["mse"]
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        run.checkpoints.append(model.snapshot())
        run.train_losses.append(train_loss)
        run.val_losses.append(val_loss)
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if remaining is None:
            if stopper.update(epoch, val_loss):
                remaining = extra_epochs
        else:
            remaining -= 1
        if remaining is not None and remaining <= 0:
            break
    run.best_epoch = stopper.best_epoch
    run.stop_epoch = stopper.stop_epoch
    return run


# -- persistence ----------------------------------------------------------------------


def save_run(run: TrainRun, directory, config: dict | None = None) -> Path:
    """Write ``config.json``, ``losses.csv`` and ``checkpoints/epoch_NNN.json``."""
    root = Path(directory)
    (root / "checkpoints").mkdir(parents=True, exist_ok=True)
    doc = {
        "model": run.model.config.to_dict(),
        "best_epoch": run.best_epoch,
        "stop_epoch": run.stop_epoch,
        "epochs": run.epochs,
        **(config or {}),
    }
    (root / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    with open(root / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tl, vl) in enumerate(zip(run.train_losses, run.val_losses)):
            w.writerow([e, repr(tl), repr(vl)])
    for e in range(len(run.checkpoints)):
        path = root / "checkpoints" / f"epoch_{e:03d}.json"
        path.write_text(json.dumps(checkpoint_dict(run.model_at(e), e), sort_keys=True, indent=1) + "\n")
    return root


def checkpoint_path(directory, epoch: int) -> Path:
    return Path(directory) / "checkpoints" / f"epoch_{epoch:03d}.json"


def load_run(directory) -> TrainRun:
    root = Path(directory)
    doc = json.loads((root / "config.json").read_text())
    snaps, model = [], None
    for e in range(doc["epochs"] + 1):
        m = model_from_checkpoint(json.loads(checkpoint_path(root, e).read_text()))
        model = model or m
        snaps.append(m.snapshot())
    train, val = [], []
    with open(root / "losses.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            train.append(float(row["train_loss"]))
            val.append(float(row["val_loss"]))
    model.load_snapshot(snaps[-1])
    return TrainRun(model, snaps, train, val, doc.get("best_epoch"), doc.get("stop_epoch"), doc)
