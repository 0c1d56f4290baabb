import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from hamkit import autodiff as ad
from hamkit.analytics import proportionality_line
from hamkit.data import WindowSet
from hamkit.ham import (HamConfig, LossTerm, NonDecomposableLoss, Objective, _prefix_suffix,
                        decomposition_check, full_gradient_norm, ham_fast, ham_naive, l2_penalty, make_mask,
                        masked_gradients, masked_loss, mse_loss, register_unmaskable_loss)
from hamkit.models import ModelConfig, init_model
from helpers import random_model, random_windows


@pytest.mark.parametrize("mode, cut, bits", [
    ("causal", 3, [1, 1, 1, 0, 0]),
    ("anticausal", 3, [0, 0, 0, 1, 1]),
    ("causal", 0, [0, 0, 0, 0, 0]),
    ("anticausal", 0, [1, 1, 1, 1, 1]),
    ("causal", 5, [1, 1, 1, 1, 1]),
])
def test_make_mask(mode, cut, bits):
    assert_array_equal(make_mask(mode, cut, 5).bits, bits)


@pytest.mark.parametrize("args", [("sideways", 1, 3), ("causal", 4, 3), ("causal", -1, 3), ("causal", 0, 0)])
def test_make_mask_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_mask(*args)


def test_masked_loss_examples():
    pred = ad.Tensor(np.array([[2.0], [np.sqrt(2.0)]]))
    target = np.zeros((2, 1))
    assert_allclose(masked_loss(pred, target, make_mask("causal", 1, 2)).data.item(), 2.0, rtol=1e-15)
    assert masked_loss(pred, target, make_mask("causal", 0, 2)).data.item() == 0.0
    assert_allclose(masked_loss(pred, target, make_mask("causal", 2, 2)).data.item(), mse_loss(pred, target).data.item())


def _model_and_windows(kind, seed, n=10, H=None, **kw):
    rng = np.random.default_rng(seed)
    m = random_model(kind, rng, H, **kw)
    return m, random_windows(m.config, rng, n)


def test_naive_endpoints():
    m, ws = _model_and_windows("mlp", 0, H=4)
    cfg = HamConfig(batch_size=3)
    curves = ham_naive(m, ws, cfg)
    assert_allclose(curves["causal"].overall[-1], full_gradient_norm(m, ws, cfg), rtol=1e-12)
    assert curves["anticausal"].overall[-1] == 0.0
    assert curves["causal"].overall[0] == 0.0


def test_one_parameter_closed_form():
    # y = w * [1, 1] through a linear head with L=1, H=2 and input 1
    m = init_model(ModelConfig("linear", 1, 2, 1))
    w, t1, t2 = 0.7, 2.0, -1.0
    m.params["linear.weight"].value = np.array([[w], [w]])
    ws = WindowSet(np.ones((1, 1, 1)), np.array([[[t1], [t2]]]), np.zeros(1, np.int64))
    causal = ham_naive(m, ws, HamConfig(), modes=("causal",))["causal"]
    # weight and bias see the same gradient 2 (w - t1) / 2 at cut 1
    assert_allclose(causal.per_layer["linear.weight"][1], abs(2 * (w - t1)) / 2, rtol=1e-14)
    assert_allclose(causal.overall[1], abs(2 * (w - t1)) / 2, rtol=1e-14)


def test_fast_matches_naive_on_mlp_three_batches():
    m, ws = _model_and_windows("mlp", 1, n=9, H=8, dropout=0.2)
    cfg = HamConfig(batch_size=3)
    fast, naive = ham_fast(m, ws, cfg), ham_naive(m, ws, cfg)
    for mode in naive:
        assert_allclose(fast[mode].overall, naive[mode].overall, rtol=1e-8, atol=1e-300)
        for name in naive[mode].per_layer:
            assert_allclose(fast[mode].per_layer[name], naive[mode].per_layer[name], rtol=1e-8)


@pytest.mark.parametrize("norm", ["l2", "l1", "linf"])
@pytest.mark.parametrize("reduction", ["mean", "global"])
def test_fast_matches_naive_for_norm_kinds(norm, reduction):
    m, ws = _model_and_windows("cycle", 2, n=7, H=5)
    cfg = HamConfig(batch_size=4, norm=norm, reduction=reduction)
    fast, naive = ham_fast(m, ws, cfg), ham_naive(m, ws, cfg)
    for mode in naive:
        assert_allclose(fast[mode].overall, naive[mode].overall, rtol=1e-10)


def test_prefix_at_end_equals_suffix_at_start():
    g = np.random.default_rng(3).normal(size=(6, 4, 3))
    prefix, suffix = _prefix_suffix(g)
    assert_allclose(prefix[-1], suffix[0], rtol=1e-13)
    assert_array_equal(prefix[0], 0.0)
    assert_array_equal(suffix[-1], 0.0)


def test_single_step_horizon():
    m, ws = _model_and_windows("nlinear", 4, H=1)
    fast = ham_fast(m, ws)
    full = full_gradient_norm(m, ws)
    assert_allclose(fast["causal"].overall[1], full, rtol=1e-12)
    assert_allclose(fast["anticausal"].overall[0], full, rtol=1e-12)


def test_zero_aux_term_changes_nothing():
    m, ws = _model_and_windows("linear", 5)
    zero = LossTerm("zero", lambda model, tape, pred: ad.matmul(np.zeros((1, 1)),
                                                                ad.reshape(ad.mean_axis(pred), (1, 1))))
    base = ham_fast(m, ws)
    withz = ham_fast(m, ws, objective=register_unmaskable_loss(zero))
    for mode in base:
        assert_allclose(withz[mode].overall, base[mode].overall, rtol=1e-14, atol=0)


def test_l2_penalty_sets_causal_start():
    lam = 0.3
    m, ws = _model_and_windows("mlp", 6, H=3)
    obj = register_unmaskable_loss(l2_penalty(lam))
    curves = ham_fast(m, ws, HamConfig(batch_size=4), obj)
    expect = np.mean([np.linalg.norm(2 * lam * g.value) for g in m.param_groups()])
    assert_allclose(curves["causal"].overall[0], expect, rtol=1e-12)
    assert_allclose(curves["anticausal"].overall[-1], expect, rtol=1e-12)
    assert ham_fast(m, ws)["causal"].overall[0] == 0.0
    naive = ham_naive(m, ws, HamConfig(batch_size=4), objective=obj)
    assert_allclose(curves["causal"].overall, naive["causal"].overall, rtol=1e-9)


def test_maskable_aux_terms_are_rejected():
    with pytest.raises(NonDecomposableLoss):
        Objective((LossTerm("bad", lambda *a: None, maskable=True),))


@pytest.mark.parametrize("kind", ["linear", "nlinear", "mlp", "cycle"])
def test_decomposition_check(kind):
    m, ws = _model_and_windows(kind, 7, H=5)
    for cut in range(6):
        res = decomposition_check(m, ws, cut)
        assert res.ok and res.max_deviation < 1e-10
    H = m.config.horizon
    for g in masked_gradients(m, ws, make_mask("causal", 0, H), HamConfig()):
        assert_array_equal(g, 0.0)
    for g in masked_gradients(m, ws, make_mask("anticausal", H, H), HamConfig()):
        assert_array_equal(g, 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["linear", "nlinear", "mlp", "cycle"]))
def test_triangle_inequality_at_every_cut(seed, kind):
    m, ws = _model_and_windows(kind, seed, n=6)
    cfg = HamConfig(batch_size=4)
    curves = ham_fast(m, ws, cfg)
    full = full_gradient_norm(m, ws, cfg)
    total = curves["causal"].overall + curves["anticausal"].overall
    assert np.all(total >= full * (1 - 1e-12))


def test_curves_are_not_assumed_monotone():
    # both steps share the single queue slot; opposite errors cancel in the prefix sum
    m = init_model(ModelConfig("cycle", 1, 2, 1, cycle_length=1))
    m.params["linear.weight"].value[:] = 0.0
    ws = WindowSet(np.ones((1, 1, 1)), np.array([[[-1.0], [1.0]]]), np.zeros(1, np.int64))
    q = ham_fast(m, ws)["causal"].per_layer["cycle.queue"]
    assert q[1] > 0 and q[2] == 0.0


def test_replay_is_bit_stable_and_worker_independent():
    m, ws = _model_and_windows("mlp", 8, n=20, H=6, dropout=0.2)
    a = ham_fast(m, ws, HamConfig(batch_size=3, seed=4))
    b = ham_fast(m, ws, HamConfig(batch_size=3, seed=4))
    c = ham_fast(m, ws, HamConfig(batch_size=3, seed=4, workers=3))
    for mode in a:
        assert_array_equal(a[mode].overall, b[mode].overall)
        assert_array_equal(a[mode].overall, c[mode].overall)


def test_eval_mode_ignores_dropout_seed():
    m, ws = _model_and_windows("mlp", 9, H=3, dropout=0.3)
    a = ham_fast(m, ws, HamConfig(train_mode=False, seed=1))
    b = ham_fast(m, ws, HamConfig(train_mode=False, seed=2))
    assert_array_equal(a["causal"].overall, b["causal"].overall)
    c = ham_fast(m, ws, HamConfig(train_mode=True, seed=1))
    assert not np.array_equal(a["causal"].overall, c["causal"].overall)


def test_partial_batch_is_weighted_by_size():
    m, ws = _model_and_windows("linear", 10, n=5, H=3)
    cfg = HamConfig(batch_size=2)
    sizes, parts = [2, 2, 1], []
    for lo, n in zip((0, 2, 4), sizes):
        parts.append(ham_fast(m, ws.subset(slice(lo, lo + n)), HamConfig(batch_size=n))["causal"].overall)
    expect = sum(n * p for n, p in zip(sizes, parts)) / 5
    assert_allclose(ham_fast(m, ws, cfg)["causal"].overall, expect, rtol=1e-13)


def test_queue_curve_meets_its_line_at_cycle_multiples():
    # zero head: each step's error depends only on its phase, so after k whole
    # cycles every queue slot has collected exactly k copies of its error
    Q, m_cycles, L = 4, 3, 5
    H = Q * m_cycles
    model = init_model(ModelConfig("cycle", L, H, 2, cycle_length=Q))
    model.params["linear.weight"].value[:] = 0.0
    rng = np.random.default_rng(11)
    model.params["cycle.queue"].value = rng.normal(size=(Q, 2))
    pattern = rng.normal(size=(Q, 2))
    starts = np.arange(9)
    t = starts[:, None] + np.arange(L + H)
    series = pattern[t % Q]
    ws = WindowSet(series[:, :L], series[:, L:], starts)
    curves = ham_fast(model, ws, HamConfig(batch_size=1))
    for mode in ("causal", "anticausal"):
        q = curves[mode].per_layer["cycle.queue"]
        line = proportionality_line(q, mode).values()
        ks = np.arange(0, H + 1, Q)
        assert_allclose(q[ks], line[ks], rtol=1e-12, atol=1e-15)
