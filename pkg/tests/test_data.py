from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from condattr.data import (AnomalyEvent, DataError, LabeledDataset, LeakageError, NormalizationStats,
                           SeriesMatrix, Window, apply_normalization, fit_normalization,
                           invert_normalization, load_csv, load_labels, mask_sensor, save_csv,
                           save_labels, sliding_windows, stack_windows, window_starts,
                           windows_of_event)


def _series(values, names=None):
    values = np.asarray(values, dtype=float)
    return SeriesMatrix(values, names or tuple(f"s{j}" for j in range(values.shape[1])))


# ------------------------------------------------------------------ csv

def test_load_small_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n3.5,-4\n0,1e3\n")
    s = load_csv(p)
    assert (s.T, s.d) == (3, 2)
    assert s.sensor_names == ("a", "b")
    np.testing.assert_array_equal(s.values, [[1, 2], [3.5, -4], [0, 1000]])


def test_load_csv_with_timestamps(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("timestamp,a\n10,1\n20,2\n")
    s = load_csv(p, has_timestamp=True)
    np.testing.assert_array_equal(s.timestamps, [10, 20])
    p.write_text("timestamp,a\n20,1\n10,2\n")
    with pytest.raises(DataError, match="increasing"):
        load_csv(p, has_timestamp=True)


def test_nan_cell_names_row_and_column(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n3,nan\n")
    with pytest.raises(DataError) as exc:
        load_csv(p)
    assert ":3:" in str(exc.value) and "'b'" in str(exc.value)


def test_ragged_and_non_numeric_rows(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match=":3:"):
        load_csv(p)
    p.write_text("a,b\n1,x\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(p)


def test_csv_round_trip_ten_thousand_rows(tmp_path, rng):
    s = _series(rng.standard_normal((10_000, 3)) * 1e3)
    p = tmp_path / "r.csv"
    save_csv(s, p, digits=9)
    back = load_csv(p)
    expected = np.array([[float(f"{v:.9g}") for v in row] for row in s.values])
    np.testing.assert_array_equal(back.values, expected)
    save_csv(s, p)  # default is lossless
    np.testing.assert_array_equal(load_csv(p).values, s.values)
    assert not (tmp_path / "r.csv.tmp").exists()


def test_labels_round_trip(tmp_path):
    s = _series(np.zeros((20, 3)), ("x", "y", "z"))
    events = [AnomalyEvent(3, 4, frozenset({0, 2})), AnomalyEvent(10, 1, frozenset({1}))]
    p = tmp_path / "l.json"
    save_labels(events, s.sensor_names, p)
    assert json.loads(p.read_text())[0]["sensors"] == ["x", "z"]
    assert load_labels(p, s) == events


def test_series_rejects_non_finite():
    with pytest.raises(DataError, match="row 1, column 0"):
        _series([[0.0], [np.inf]])


# -------------------------------------------------------- normalization

def test_constant_column():
    st_ = fit_normalization(_series([[5.0], [5.0], [5.0]]))
    assert st_.mean[0] == 5.0 and st_.std[0] == 1.0 and st_.constant_mask[0]


def test_population_std():
    st_ = fit_normalization(_series([[0.0], [2.0]]))
    assert st_.mean[0] == 1.0 and st_.std[0] == 1.0


def test_normalized_range_has_zero_mean(rng):
    s = _series(rng.normal(3.0, 2.0, size=(500, 4)))
    st_ = fit_normalization(s, (100, 400))
    z = apply_normalization(s, st_).values[100:400]
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)


def test_apply_identity_and_direct_formula():
    s = _series([[3.0, 1.0]])
    ident = NormalizationStats(np.zeros(2), np.ones(2), np.zeros(2, bool))
    np.testing.assert_array_equal(apply_normalization(s, ident).values, s.values)
    stats = NormalizationStats(np.array([1.0, 0.0]), np.array([2.0, 1.0]), np.zeros(2, bool))
    assert apply_normalization(s, stats).values[0, 0] == 1.0


@given(arrays(float, (30, 3), elements=st.floats(-1e3, 1e3)))
def test_normalize_inverse(values):
    s = _series(values)
    stats = fit_normalization(s)
    back = invert_normalization(apply_normalization(s, stats), stats)
    np.testing.assert_allclose(back.values, s.values, rtol=0, atol=1e-12 * max(1.0, np.abs(values).max()))


@given(arrays(float, (40, 2), elements=st.floats(-100, 100)))
def test_normalization_idempotent(values):
    z = apply_normalization(_series(values), fit_normalization(_series(values)))
    again = apply_normalization(z, fit_normalization(z))
    assert np.max(np.abs(again.values - z.values)) < 1e-9


# ----------------------------------------------------------- windowing

def test_single_window_boundary():
    assert len(sliding_windows(_series(np.zeros((5, 2))), 5, 1)) == 1


def test_strided_windows():
    ws = sliding_windows(_series(np.zeros((10, 1))), 3, 2)
    assert [w.start for w in ws] == [0, 2, 4, 6]


def test_window_rows_match_series(rng):
    s = _series(rng.standard_normal((12, 3)))
    for w in sliding_windows(s, 4):
        for r in range(4):
            np.testing.assert_array_equal(w.data[r], s.values[w.start + r])
    stacked = stack_windows(s, [0, 5, 8], 4)
    np.testing.assert_array_equal(stacked[1], s.values[5:9])


@given(st.integers(1, 8), st.integers(9, 40))
def test_interior_rows_covered_w_times(w, T):
    counts = np.zeros(T, int)
    for s in window_starts(T, w, 1):
        counts[s:s + w] += 1
    assert np.all(counts[w - 1:T - w + 1] == w)


def test_window_too_long():
    with pytest.raises(DataError):
        window_starts(4, 5)


# -------------------------------------------------------------- masking

def test_mask_single_sensor_is_all_zero():
    m = mask_sensor(Window(0, np.ones((4, 1))), 0)
    assert np.all(m.representation == 0)


@given(arrays(float, (6, 4), elements=st.floats(-1e6, 1e6)), st.integers(0, 3))
def test_mask_preserves_other_columns(data, j):
    m = mask_sensor(Window(0, data), j)
    keep = [c for c in range(4) if c != j]
    assert np.array_equal(m.representation[:, keep], data[:, keep])
    restored = m.representation.copy()
    restored[:, j] = data[:, j]
    assert np.array_equal(restored, data)


def test_masked_distance_ignores_column(rng):
    a, b = rng.standard_normal((2, 7, 3))
    j = 1
    ma, mb = mask_sensor(Window(0, a), j), mask_sensor(Window(0, b), j)
    dist = np.linalg.norm(ma.representation - mb.representation)
    explicit = np.linalg.norm(a[:, [0, 2]] - b[:, [0, 2]])
    assert dist == pytest.approx(explicit, abs=1e-12)


def test_mask_out_of_range():
    with pytest.raises(DataError):
        mask_sensor(Window(0, np.ones((2, 2))), 2)


# --------------------------------------------------------------- events

def test_event_covering_whole_series():
    s = _series(np.zeros((10, 2)))
    ev = AnomalyEvent(0, 10, frozenset({0}))
    assert len(windows_of_event(s, ev, 3)) == 8


def test_single_step_event_interior():
    s = _series(np.zeros((20, 2)))
    ds = LabeledDataset(s, [AnomalyEvent(10, 1, frozenset({1}))], (0, 5))
    ws = windows_of_event(ds, ds.events[0], 3)
    assert [w.start for w in ws] == [8, 9, 10]


def test_disjoint_event_has_no_windows():
    s = _series(np.zeros((20, 2)))
    assert windows_of_event(s, AnomalyEvent(30, 2, frozenset({0})), 3) == []


def test_train_range_overlapping_event_is_rejected():
    s = _series(np.zeros((20, 2)))
    with pytest.raises(LeakageError):
        LabeledDataset(s, [AnomalyEvent(4, 3, frozenset({0}))], (0, 10))
    ds = LabeledDataset(s, [AnomalyEvent(14, 3, frozenset({0}))], (0, 10))
    with pytest.raises(LeakageError):
        ds.assert_normal_range(10, 15)


def test_event_validation():
    with pytest.raises(DataError):
        AnomalyEvent(0, 0, frozenset({0}))
    with pytest.raises(DataError):
        AnomalyEvent(0, 1, frozenset())
    with pytest.raises(DataError, match="unknown sensors"):
        LabeledDataset(_series(np.zeros((10, 2))), [AnomalyEvent(6, 1, frozenset({5}))], (0, 5))
