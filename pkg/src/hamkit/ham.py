"""Horizon activation maps: gradient-norm averages over horizon subseries.

For a cut ``h_hat`` in ``0..H`` the causal mask keeps horizon steps
``1..h_hat`` and the anticausal mask keeps ``h_hat+1..H``. The masked loss is
the sum of the kept per-timestep losses divided by the full horizon ``H``.
For every cut and mode we backpropagate that loss per batch, take per-layer
gradient norms, reduce them to one "overall" number, and average over
batches.

Two routes compute the same curves:

* :func:`ham_naive` runs one masked backward pass per (cut, mode, batch).
* :func:`ham_fast` records one forward pass per batch, pushes all ``H``
  per-timestep cotangents through a single vectorized reverse sweep, then
  takes prefix sums (causal) and suffix sums (anticausal) of the per-timestep
  gradients. The masked gradient is linear in the mask, so both agree up to
  float rounding.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import WindowSet
from .models import ForecastModel

MODES = ("causal", "anticausal")
NORM_KINDS = ("l2", "l1", "linf")
REDUCTIONS = ("mean", "global")


class NonDecomposableLoss(ValueError):
    """A loss term that cannot be split per horizon timestep was marked maskable."""


@dataclass(frozen=True)
class HorizonMask:
    mode: str
    cut: int
    horizon: int
    bits: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.bits.astype(np.float64)


def make_mask(mode: str, cut: int, horizon: int) -> HorizonMask:
    """Binary mask over horizon steps ``h = 1..H`` (returned 0-indexed)."""
    if mode not in MODES:
        raise ValueError(f"unknown mask mode {mode!r}; expected one of {MODES}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= cut <= horizon:
        raise ValueError(f"cut must lie in [0, {horizon}], got {cut}")
    h = np.arange(1, horizon + 1)
    bits = (h <= cut) if mode == "causal" else (h > cut)
    return HorizonMask(mode, cut, horizon, bits.astype(np.int8))


# -- losses ---------------------------------------------------------------------


def timestep_losses(pred: Tensor, target) -> Tensor:
    """Per-timestep squared error averaged over channels and batch, shape ``(H, 1)``."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"masked_loss: prediction shape {pred.shape} != target shape {target.shape}")
    sq = ad.square(ad.sub(pred, target))
    per_step = ad.mean_axis(sq, axis=-1, keepdims=True)  # (..., H, 1)
    if per_step.data.ndim == 3:
        per_step = ad.mean_axis(per_step, axis=0)
    return per_step


def weighted_sum(per_step: Tensor, weights: np.ndarray) -> Tensor:
    """``sum_h weights[h] * per_step[h]`` as a ``(1, 1)`` tensor."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    return ad.matmul(w, per_step)


def masked_loss(pred: Tensor, target, mask: HorizonMask) -> Tensor:
    """Sum of the masked per-timestep losses divided by the full horizon H."""
    per_step = timestep_losses(pred, target)
    if per_step.shape[0] != mask.horizon:
        raise ad.ShapeError(f"masked_loss: horizon {per_step.shape[0]} != mask horizon {mask.horizon}")
    return weighted_sum(per_step, mask.weights / mask.horizon)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over batch, horizon and channels."""
    per_step = timestep_losses(pred, target)
    h = per_step.shape[0]
    return weighted_sum(per_step, np.full(h, 1.0 / h))


AuxFn = Callable[[ForecastModel, Tape, Tensor], Tensor]


@dataclass(frozen=True)
class LossTerm:
    """An extra scalar loss ``fn(model, tape, pred)`` added to the regression loss."""

    name: str
    fn: AuxFn
    maskable: bool = False


@dataclass(frozen=True)
class Objective:
    """Regression MSE plus auxiliary terms; only the regression part is masked."""

    aux: tuple[LossTerm, ...] = ()

    def __post_init__(self):
        for term in self.aux:
            if term.maskable:
                raise NonDecomposableLoss(
                    f"loss term {term.name!r} is marked maskable; only the per-timestep regression loss can be masked"
                )

    def aux_loss(self, model: ForecastModel, tape: Tape, pred: Tensor) -> Tensor | None:
        total = None
        for term in self.aux:
            value = term.fn(model, tape, pred)
            if value.size != 1:
                raise ad.ShapeError(f"aux loss {term.name!r} must be scalar, got shape {value.shape}")
            value = ad.reshape(value, (1, 1))
            total = value if total is None else ad.add(total, value)
        return total


REGRESSION_ONLY = Objective()


def register_unmaskable_loss(term: LossTerm, objective: Objective = REGRESSION_ONLY) -> Objective:
    """Return ``objective`` extended by ``term``, whose gradient HAM never masks."""
    if term.maskable:
        term = LossTerm(term.name, term.fn, maskable=False)
    return Objective(objective.aux + (term,))


def l2_penalty(strength: float) -> LossTerm:
    """``strength * sum ||theta||^2`` over every parameter group."""

    def fn(model: ForecastModel, tape: Tape, pred: Tensor) -> Tensor:
        total = None
        for group in model.param_groups():
            sq = ad.mean_axis(ad.square(tape.param(group)), axis=None, keepdims=True)
            term = ad.matmul(ad.reshape(sq, (1, 1)), np.array([[strength * group.size]]))
            total = term if total is None else ad.add(total, term)
        return total

    return LossTerm(f"l2[{strength!r}]", fn)


def full_loss(model, tape, pred, target, objective: Objective = REGRESSION_ONLY, mask: HorizonMask | None = None):
    loss = mse_loss(pred, target) if mask is None else masked_loss(pred, target, mask)
    aux = objective.aux_loss(model, tape, pred)
    return loss if aux is None else ad.add(loss, aux)


# -- norms ---------------------------------------------------------------------------


def _norms(grads: np.ndarray, kind: str) -> np.ndarray:
    """Norm over all axes but the first: ``grads`` is ``(K, ...)``."""
    flat = grads.reshape(grads.shape[0], -1)
    if kind == "l2":
        return np.sqrt(np.einsum("ij,ij->i", flat, flat))
    if kind == "l1":
        return np.abs(flat).sum(axis=1)
    if kind == "linf":
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(flat.shape[0])
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def reduce_layers(layer_norms: np.ndarray, norm: str, reduction: str) -> np.ndarray:
    """Collapse ``(K, n_layers)`` per-layer norms to ``(K,)``."""
    if reduction == "mean":
        return layer_norms.mean(axis=1)
    if reduction == "global":
        # norm of the concatenated gradient, recovered from per-layer norms
        if norm == "l2":
            return np.sqrt((layer_norms ** 2).sum(axis=1))
        if norm == "l1":
            return layer_norms.sum(axis=1)
        return layer_norms.max(axis=1)
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


# -- curves -------------------------------------------------------------------


@dataclass
class HamCurve:
    """Gradient-norm averages for one mode, indexed by the cut ``0..H``."""

    mode: str
    horizon: int
    overall: np.ndarray
    per_layer: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.overall = np.asarray(self.overall, dtype=np.float64)
        if self.overall.shape != (self.horizon + 1,):
            raise ValueError(f"{self.mode} curve needs {self.horizon + 1} values, got {self.overall.shape}")
        self.per_layer = {k: np.asarray(v, dtype=np.float64) for k, v in self.per_layer.items()}

    def scaled(self, k: float) -> HamCurve:
        return HamCurve(self.mode, self.horizon, self.overall * k,
                        {n: v * k for n, v in self.per_layer.items()}, dict(self.metadata))

    def layer(self, name: str) -> HamCurve:
        """View a single layer's curve as its own HamCurve."""
        if name not in self.per_layer:
            raise KeyError(f"no layer {name!r}; available: {sorted(self.per_layer)}")
        meta = dict(self.metadata, layer=name)
        return HamCurve(self.mode, self.horizon, self.per_layer[name], {name: self.per_layer[name]}, meta)


@dataclass(frozen=True)
class HamConfig:
    batch_size: int = 4096
    norm: str = "l2"
    reduction: str = "mean"
    train_mode: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm!r}; expected one of {NORM_KINDS}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")


def dropout_rng(seed: int, batch_index: int) -> np.random.Generator:
    """Generator replayed for every cut and mode of one batch."""
    return np.random.default_rng([seed, batch_index])


def _forward(model: ForecastModel, batch: WindowSet, cfg: HamConfig, batch_index: int) -> tuple[Tape, Tensor]:
    tape = Tape()
    pred = model.forward(batch.inputs, train_mode=cfg.train_mode, step_index=batch.starts,
                         rng=dropout_rng(cfg.seed, batch_index), tape=tape)
    return tape, pred


def _batched(windows: WindowSet, batch_size: int) -> list[WindowSet]:
    if len(windows) == 0:
        raise ValueError("HAM needs a nonempty window set")
    return list(windows.batches(batch_size))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(items)), items))


def _average(results: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    # fixed batch order keeps the reduction bit-reproducible
    total = np.zeros_like(results[0])
    for r, n in zip(results, sizes):
        total = total + n * r
    return total / float(sum(sizes))


def _assemble(mode: str, horizon: int, names: list[str], layer_norms: np.ndarray,
              cfg: HamConfig, meta: dict) -> HamCurve:
    overall = reduce_layers(layer_norms, cfg.norm, cfg.reduction)
    per_layer = {n: layer_norms[:, j].copy() for j, n in enumerate(names)}
    metadata = {"norm": cfg.norm, "reduction": cfg.reduction, "batch_size": cfg.batch_size,
                "train_mode": cfg.train_mode, "seed": cfg.seed, **meta}
    return HamCurve(mode, horizon, overall, per_layer, metadata)


def masked_gradients(model: ForecastModel, batch: WindowSet, mask: HorizonMask | None,
                     cfg: HamConfig, batch_index: int = 0,
                     objective: Objective = REGRESSION_ONLY) -> list[np.ndarray]:
    """Per-layer gradients of the (masked) objective for one batch; ``mask=None`` is the full loss."""
    groups = model.param_groups()
    tape, pred = _forward(model, batch, cfg, batch_index)
    loss = full_loss(model, tape, pred, batch.targets, objective, mask)
    return [g[0] for g in ad.vjp(loss, np.ones((1, 1, 1)), groups)]


def ham_naive(model: ForecastModel, windows: WindowSet, cfg: HamConfig = HamConfig(),
              modes: Sequence[str] = MODES, objective: Objective = REGRESSION_ONLY,
              meta: dict | None = None) -> dict[str, HamCurve]:
    """Reference route: one masked backward pass per cut, mode and batch."""
    H = model.config.horizon
    names = model.layer_names()
    batches = _batched(windows, cfg.batch_size)

    def run(i, batch):
        out = np.zeros((len(modes), H + 1, len(names)))
        for m, mode in enumerate(modes):
            for cut in range(H + 1):
                grads = masked_gradients(model, batch, make_mask(mode, cut, H), cfg, i, objective)
                out[m, cut] = [_norms(g[None], cfg.norm)[0] for g in grads]
        return out

    avg = _average(_map(run, batches, cfg.workers), [len(b) for b in batches])
    return {mode: _assemble(mode, H, names, avg[m], cfg, meta or {}) for m, mode in enumerate(modes)}


def timestep_gradients(model: ForecastModel, batch: WindowSet, cfg: HamConfig,
                       batch_index: int = 0, objective: Objective = REGRESSION_ONLY):
    """Gradients of each per-timestep loss ``l_h / H`` for one batch.

    Returns ``(per_step, aux)``: ``per_step`` holds one ``(H,) + shape`` array per
    layer; ``aux`` holds the unmaskable objective's per-layer gradients or None.
    """
    groups = model.param_groups()
    tape, pred = _forward(model, batch, cfg, batch_index)
    err = pred.data - batch.targets
    B, H, C = err.shape
    cot = np.zeros((H, B, H, C))
    scale = 2.0 / (B * C * H)
    for h in range(H):
        cot[h, :, h, :] = scale * err[:, h, :]
    per_step = ad.vjp(pred, cot, groups)
    aux = None
    aux_loss = objective.aux_loss(model, tape, pred)
    if aux_loss is not None:
        aux = [g[0] for g in ad.vjp(aux_loss, np.ones((1, 1, 1)), groups)]
    return per_step, aux


def _prefix_suffix(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Causal prefix sums and anticausal suffix sums, each ``(H+1,) + shape``."""
    shape = (g.shape[0] + 1,) + g.shape[1:]
    prefix, suffix = np.empty(shape), np.empty(shape)
    prefix[0] = 0.0
    suffix[-1] = 0.0
    # row-by-row adds over contiguous slabs; np.cumsum along axis 0 is several times slower
    H = g.shape[0]
    for h in range(H):
        np.add(prefix[h], g[h], out=prefix[h + 1])
        np.add(suffix[H - h], g[H - 1 - h], out=suffix[H - 1 - h])
    return prefix, suffix


def ham_fast(model: ForecastModel, windows: WindowSet, cfg: HamConfig = HamConfig(),
             objective: Objective = REGRESSION_ONLY, meta: dict | None = None) -> dict[str, HamCurve]:
    """Prefix/suffix-sum route; returns both modes."""
    H = model.config.horizon
    names = model.layer_names()
    batches = _batched(windows, cfg.batch_size)

    def run(i, batch):
        per_step, aux = timestep_gradients(model, batch, cfg, i, objective)
        out = np.zeros((2, H + 1, len(names)))
        for j, g in enumerate(per_step):
            prefix, suffix = _prefix_suffix(g)
            if aux is not None:
                prefix = prefix + aux[j]
                suffix = suffix + aux[j]
            out[0, :, j] = _norms(prefix, cfg.norm)
            out[1, :, j] = _norms(suffix, cfg.norm)
        return out

    avg = _average(_map(run, batches, cfg.workers), [len(b) for b in batches])
    return {mode: _assemble(mode, H, names, avg[m], cfg, meta or {}) for m, mode in enumerate(MODES)}


def full_gradient_norm(model: ForecastModel, windows: WindowSet, cfg: HamConfig = HamConfig(),
                       objective: Objective = REGRESSION_ONLY) -> float:
    """Overall gradient-norm average of the unmasked loss (the causal curve's endpoint)."""
    names = model.layer_names()
    batches = _batched(windows, cfg.batch_size)

    def run(i, batch):
        grads = masked_gradients(model, batch, None, cfg, i, objective)
        return np.array([[_norms(g[None], cfg.norm)[0] for g in grads]])

    avg = _average(_map(run, batches, cfg.workers), [len(b) for b in batches])
    return float(reduce_layers(avg, cfg.norm, cfg.reduction)[0]) if names else 0.0


@dataclass(frozen=True)
class DecompositionResult:
    ok: bool
    max_deviation: float
    per_layer: dict[str, float]


def decomposition_check(model: ForecastModel, batch: WindowSet, cut: int, cfg: HamConfig = HamConfig(),
                        tol: float = 1e-10) -> DecompositionResult:
    """Check causal(cut) + anticausal(cut) == full gradient per layer."""
    H = model.config.horizon
    gc = masked_gradients(model, batch, make_mask("causal", cut, H), cfg)
    ga = masked_gradients(model, batch, make_mask("anticausal", cut, H), cfg)
    gf = masked_gradients(model, batch, None, cfg)
    devs = {}
    for name, c, a, f in zip(model.layer_names(), gc, ga, gf):
        scale = np.abs(f).max() if f.size else 0.0
        diff = np.abs(c + a - f).max() if f.size else 0.0
        devs[name] = float(diff / scale) if scale > 0 else float(diff)
    worst = max(devs.values(), default=0.0)
    return DecompositionResult(worst < tol, worst, devs)
