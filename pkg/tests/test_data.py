import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from hamkit import data as D


def _write(path, text):
    path.write_text(text)
    return path


def test_load_plain_csv(tmp_path):
    f = _write(tmp_path / "a.csv", "x,y\n1,2\n3,4\n5,6\n")
    fr = D.load_csv(f)
    assert fr.values.shape == (3, 2)
    assert fr.channels == ("x", "y")
    assert fr.timestamps is None


def test_load_csv_with_date_column(tmp_path):
    f = _write(tmp_path / "a.csv", "date,x\n2020-01-01,1\n2020-01-02,2\n")
    fr = D.load_csv(f)
    assert fr.timestamps == ("2020-01-01", "2020-01-02")
    assert_array_equal(fr.values, [[1.0], [2.0]])


def test_load_ett_style_file(tmp_path):
    cols = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]
    rng = np.random.default_rng(0)
    lines = ["date," + ",".join(cols)]
    for i in range(100):
        lines.append(f"2016-07-01 {i // 4:02d}:{15 * (i % 4):02d}:00," + ",".join(f"{v:.3f}" for v in rng.normal(size=7)))
    fr = D.load_csv(_write(tmp_path / "ett.csv", "\n".join(lines) + "\n"))
    assert fr.values.shape == (100, 7)
    assert fr.channels == tuple(cols)


def test_missing_value_reports_row_and_column(tmp_path):
    f = _write(tmp_path / "a.csv", "x,y\n1,2\n3,\n5,6\n")
    with pytest.raises(D.DataError, match=r"row 3, column 'y'"):
        D.load_csv(f)
    assert_array_equal(D.load_csv(f, forward_fill=True).values[:, 1], [2.0, 2.0, 6.0])


def test_non_numeric_cell_is_an_error(tmp_path):
    f = _write(tmp_path / "a.csv", "x\n1\nabc\n")
    with pytest.raises(D.DataError, match="non-numeric"):
        D.load_csv(f)


def test_save_load_round_trip(tmp_path):
    fr = D.synth(D.SynthConfig(50, 3, ((D.SineComponent(7, 1.3, 0.2),),), noise_std=0.1, seed=3))
    D.save_csv(fr, tmp_path / "s.csv")
    back = D.load_csv(tmp_path / "s.csv")
    assert_array_equal(back.values, fr.values)


def test_synth_degenerate_is_all_zero():
    fr = D.synth(D.SynthConfig(20, 2, ((D.SineComponent(5, 0.0, 0.0),),)))
    assert_array_equal(fr.values, np.zeros((20, 2)))


def test_synth_single_sine_closed_form():
    fr = D.synth(D.SynthConfig(10, 1, ((D.SineComponent(4, 2.0, 0.7),),)))
    assert_allclose(fr.values[0, 0], 2.0 * np.sin(0.7), rtol=1e-15)
    t = np.arange(10)
    assert_allclose(fr.values[:, 0], 2.0 * np.sin(2 * np.pi * t / 4 + 0.7), rtol=1e-12, atol=1e-15)


def test_synth_seed_determinism():
    cfg = D.SynthConfig(30, 2, slope=0.1, noise_std=1.0, seed=11)
    assert_array_equal(D.synth(cfg).values, D.synth(cfg).values)
    assert D.SynthConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("T, expect", [(100, (60, 20, 20)), (101, (60, 20, 21))])
def test_split_lengths(T, expect):
    parts = D.split(D.SeriesFrame(np.zeros((T, 1)), ("a",)), D.SplitSpec(0.6, 0.2, 0.2))
    assert tuple(p.length for p in parts) == expect
    assert [p.start for p in parts] == [0, expect[0], expect[0] + expect[1]]


def test_split_rejects_empty_parts():
    with pytest.raises(D.DataError, match="empty"):
        D.split(D.SeriesFrame(np.zeros((10, 1)), ("a",)), D.SplitSpec(1.0, 0.0, 0.0))


@pytest.mark.parametrize("T, L, H, stride, n", [(10, 4, 2, 1, 5), (6, 4, 2, 1, 1), (12, 4, 2, 2, 4)])
def test_window_counts(T, L, H, stride, n):
    fr = D.SeriesFrame(np.arange(T, dtype=float)[:, None], ("a",))
    ws = D.make_windows(fr, D.WindowSpec(L, H, stride))
    assert len(ws) == n == D.WindowSpec(L, H, stride).count(T)
    assert len(list(D.windows(fr, D.WindowSpec(L, H, stride)))) == n


def test_window_contents_and_starts():
    fr = D.SeriesFrame(np.arange(20, dtype=float)[:, None], ("a",), start=100)
    ws = D.make_windows(fr, D.WindowSpec(3, 2, 2))
    assert_array_equal(ws.inputs[1, :, 0], [2, 3, 4])
    assert_array_equal(ws.targets[1, :, 0], [5, 6])
    assert_array_equal(ws.starts[:3], [100, 102, 104])


def test_too_short_series_raises():
    with pytest.raises(D.DataError):
        D.make_windows(D.SeriesFrame(np.zeros((5, 1)), ("a",)), D.WindowSpec(4, 2))


def test_standardize_closed_form():
    fr = D.SeriesFrame(np.array([[1.0], [2.0], [3.0]]), ("a",))
    (out,), sc = D.standardize([fr])
    c = 1 / np.sqrt(2 / 3)
    assert_allclose(sc.mean, [2.0])
    assert_allclose(sc.std, [np.sqrt(2 / 3)])
    assert_allclose(out.values[:, 0], [-c, 0.0, c], rtol=1e-15)


def test_validation_uses_train_statistics():
    train = D.SeriesFrame(np.array([[0.0], [2.0]]), ("a",))
    val = D.SeriesFrame(np.array([[10.0], [12.0]]), ("a",))
    (_, v), sc = D.standardize([train, val])
    assert_allclose(v.values[:, 0], [9.0, 11.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(2, 40), C=st.integers(1, 4))
def test_standardize_inverse_round_trip(seed, T, C):
    x = np.random.default_rng(seed).normal(size=(T, C)) * 5 + 3
    fr = D.SeriesFrame(x, tuple(f"c{i}" for i in range(C)))
    (out,), sc = D.standardize([fr])
    assert_allclose(sc.inverse(out).values, x, rtol=0, atol=1e-12)


def test_constant_channel_cannot_be_standardized():
    with pytest.raises(D.DataError, match="constant"):
        D.Scaler.fit(D.SeriesFrame(np.ones((4, 1)), ("a",)))


def test_select_channel():
    fr = D.SeriesFrame(np.arange(21.0).reshape(3, 7), tuple("abcdefg"))
    one = D.select_channel(fr, "c")
    assert one.values.shape == (3, 1)
    with pytest.raises(D.DataError):
        D.select_channel(fr, "z")


def test_select_then_window_equals_window_then_slice():
    fr = D.SeriesFrame(np.random.default_rng(0).normal(size=(30, 4)), ("a", "b", "c", "d"))
    spec = D.WindowSpec(5, 3, 2)
    sel = D.make_windows(D.select_channel(fr, "c"), spec)
    full = D.make_windows(fr, spec)
    assert_array_equal(sel.inputs, full.inputs[:, :, 2:3])
    assert_array_equal(sel.targets, full.targets[:, :, 2:3])


def test_batches_cover_all_windows_in_order():
    ws = D.make_windows(D.SeriesFrame(np.arange(30.0)[:, None], ("a",)), D.WindowSpec(3, 2))
    sizes = [len(b) for b in ws.batches(7)]
    assert sizes == [7, 7, 7, 5]
    assert_array_equal(np.concatenate([b.starts for b in ws.batches(7)]), ws.starts)
