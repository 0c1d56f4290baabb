"""Shared oracles and random-instance builders for the test suite."""

from __future__ import annotations

import numpy as np

from hamkit import autodiff as ad
from hamkit.data import WindowSet
from hamkit.ham import mse_loss
from hamkit.models import ModelConfig, init_model

EPS = 1e-6


def fd_grad(f, arrays, eps=EPS):
    """Central differences of the scalar ``f()`` with respect to every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            fp = f()
            a[idx] = old - eps
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def rel_err(got, want) -> float:
    """Max absolute deviation relative to the larger gradient magnitude."""
    got, want = np.asarray(got), np.asarray(want)
    scale = max(np.abs(got).max(initial=0.0), np.abs(want).max(initial=0.0))
    return float(np.abs(got - want).max(initial=0.0) / scale) if scale > 0 else 0.0


def _shape(rng, ndim, lo=1, hi=8):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


def primitive_instance(kind: str, rng):
    """``(fn, arrays)`` where ``fn(*tensors)`` applies primitive ``kind`` to random operands."""
    if kind == "matmul":
        variant = rng.integers(3)
        m, k, n = _shape(rng, 3)
        if variant == 0:
            shapes = [(m, k), (k, n)]
        elif variant == 1:
            b = int(rng.integers(1, 4))
            shapes = [(m, k), (b, k, n)]
        else:
            b = int(rng.integers(1, 4))
            shapes = [(b, m, k), (k, n)]
        return (lambda a, b: ad.matmul(a, b)), [rng.normal(size=s) for s in shapes]
    if kind in ("add", "sub"):
        s = _shape(rng, int(rng.integers(1, 4)))
        s2 = s if rng.random() < 0.5 else (1,) * (len(s) - 1) + s[-1:]
        fn = ad.add if kind == "add" else ad.sub
        return (lambda a, b: fn(a, b)), [rng.normal(size=s), rng.normal(size=s2)]
    if kind == "broadcast_sub_last":
        return (lambda x: ad.broadcast_sub_last(x)), [rng.normal(size=_shape(rng, int(rng.integers(2, 4))))]
    if kind == "relu":
        return (lambda x: ad.relu(x)), [_away_from_zero(rng, _shape(rng, 2))]
    if kind == "dropout_masked":
        s = _shape(rng, 2)
        mask = rng.random(s) >= 0.3
        return (lambda x: ad.dropout_masked(x, mask, 0.3)), [rng.normal(size=s)]
    if kind == "mean_axis":
        s = _shape(rng, 3)
        axis = [None, 0, 1, 2, -1, (0, 2)][int(rng.integers(6))]
        keep = bool(rng.integers(2))
        return (lambda x: ad.mean_axis(x, axis=axis, keepdims=keep)), [rng.normal(size=s)]
    if kind == "square":
        return (lambda x: ad.square(x)), [rng.normal(size=_shape(rng, 2))]
    if kind == "gather_cyclic":
        n, c = _shape(rng, 2)
        idx = rng.integers(0, 3 * n, size=_shape(rng, 2, hi=5))
        return (lambda q: ad.gather_cyclic(q, idx, axis=0)), [rng.normal(size=(n, c))]
    if kind == "reshape":
        a, b = _shape(rng, 2)
        return (lambda x: ad.reshape(x, (b, a))), [rng.normal(size=(a, b))]
    raise KeyError(kind)


PRIMITIVE_KINDS = ("matmul", "add", "sub", "broadcast_sub_last", "relu", "dropout_masked", "mean_axis",
                   "square", "gather_cyclic", "reshape")


def check_primitive(fn, arrays, rng) -> float:
    """Relative error of the tape VJP against central differences for a random cotangent."""
    groups = [ad.ParamGroup(f"x{i}", a) for i, a in enumerate(arrays)]
    tape = ad.Tape()
    out = fn(*[tape.param(g) for g in groups])
    weights = rng.normal(size=out.shape)
    got = ad.vjp(out, weights[None], groups)
    values = [g.value for g in groups]

    def f():
        t = ad.Tape()
        return float(np.sum(fn(*[t.constant(v) for v in values]).data * weights))

    want = fd_grad(f, values)
    return max(rel_err(g[0], w) for g, w in zip(got, want))


def random_config(kind: str, rng, horizon: int | None = None, **overrides) -> ModelConfig:
    L = int(rng.integers(2, 7))
    H = horizon or int(rng.integers(1, 7))
    C = int(rng.integers(1, 3))
    kw = dict(kind=kind, lookback=L, horizon=H, channels=C, seed=int(rng.integers(1 << 30)))
    if kind == "mlp":
        kw["hidden"] = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        kw["dropout"] = float(rng.choice([0.0, 0.2]))
    if kind == "cycle":
        kw["cycle_length"] = int(rng.integers(2, 6))
    if kind == "nlinear":
        kw["normalize"] = bool(rng.integers(2))
    kw.update(overrides)
    return ModelConfig(**kw)


def random_model(kind: str, rng, horizon: int | None = None, **overrides):
    model = init_model(random_config(kind, rng, horizon, **overrides))
    for g in model.param_groups():
        # nonzero queue/biases so every layer has a generic gradient
        g.value = g.value + 0.3 * rng.normal(size=g.value.shape)
    return model


def random_windows(config: ModelConfig, rng, n: int) -> WindowSet:
    return WindowSet(
        rng.normal(size=(n, config.lookback, config.channels)),
        rng.normal(size=(n, config.horizon, config.channels)),
        rng.integers(0, 50, size=n).astype(np.int64),
    )


def model_fd_error(model, batch: WindowSet, rng_seed: int = 0, train_mode: bool = True) -> float:
    """Relative error of the model-loss gradient against central differences over all parameters."""
    groups = model.param_groups()

    def loss(tape=None):
        tape = tape or ad.Tape()
        pred = model.forward(batch.inputs, train_mode, batch.starts, rng=np.random.default_rng(rng_seed), tape=tape)
        return mse_loss(pred, batch.targets)

    ad.backward(loss(), groups)
    got = [g.grad.copy() for g in groups]
    want = fd_grad(lambda: float(loss().data.ravel()[0]), [g.value for g in groups])
    return max(rel_err(a, b) for a, b in zip(got, want))
