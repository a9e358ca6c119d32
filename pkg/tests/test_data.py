import numpy as np
import pytest

from poolcast.data import (DataError, MtsDataset, SplitSpec, enumerate_windows,
                           fit_impute_standardize, load_dataset, prepare,
                           save_csv, save_packed, split)


def make_ds(n=2, t=10, p=3, seed=0, missing=()):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n, t, p))
    mask = np.ones((n, t, p), dtype=bool)
    for pos in missing:
        mask[pos] = False
        values[pos] = np.nan
    return MtsDataset(values, mask)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def test_csv_roundtrip_shapes(tmp_path):
    ds = make_ds(n=2, t=10, p=3)
    save_csv(ds, tmp_path / "d")
    loaded = load_dataset(str(tmp_path / "d"))
    assert (loaded.n_series, loaded.n_times, loaded.n_components) == (2, 10, 3)
    np.testing.assert_array_equal(loaded.values, ds.values)


def test_csv_empty_cell_becomes_missing(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "a.csv").write_text("1,2\n,4\n5,6\n")
    ds = load_dataset(str(d))
    assert not ds.mask[0, 1, 0]
    assert ds.mask[0, 1, 1]
    assert np.isnan(ds.values[0, 1, 0])


def test_csv_nan_token_and_unreadable(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "a.csv").write_text("1,NaN\n2,3\n")
    ds = load_dataset(str(d))
    assert not ds.mask[0, 0, 1]
    (d / "a.csv").write_text("1,bogus\n2,3\n")
    with pytest.raises(DataError, match="unreadable"):
        load_dataset(str(d))


def test_csv_dimension_mismatch(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "a.csv").write_text("1,2\n3,4\n")
    (d / "b.csv").write_text("1,2,3\n4,5,6\n")
    with pytest.raises(DataError, match="does not match"):
        load_dataset(str(d))


def test_series_order_is_lexicographic(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "b.csv").write_text("2\n2\n")
    (d / "a.csv").write_text("1\n1\n")
    ds = load_dataset(str(d))
    assert ds.names == ["a", "b"]
    assert ds.values[0, 0, 0] == 1


def test_packed_roundtrip(tmp_path):
    ds = make_ds(n=3, t=7, p=2, missing=[(1, 2, 0)])
    path = tmp_path / "data.mts"
    save_packed(ds, str(path))
    loaded = load_dataset(str(path), fmt="packed")
    np.testing.assert_array_equal(loaded.mask, ds.mask)
    np.testing.assert_array_equal(loaded.values[loaded.mask], ds.values[ds.mask])
    raw = path.read_bytes()
    assert raw[:4] == b"MTS1"
    assert int.from_bytes(raw[4:12], "little") == 3


def test_packed_truncated(tmp_path):
    path = tmp_path / "bad.mts"
    path.write_bytes(b"MTS1" + (3).to_bytes(8, "little") * 3 + b"\0" * 10)
    with pytest.raises(DataError, match="payload"):
        load_dataset(str(path), fmt="packed")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def test_split_views_cover_time_axis():
    ds = make_ds(t=288)
    views = split(ds, SplitSpec(200, 40, 48))
    assert (views["tr"].t0, views["tr"].t1) == (0, 200)
    assert (views["va"].t0, views["va"].t1) == (200, 240)
    assert (views["te"].t0, views["te"].t1) == (240, 288)
    covered = sorted((v.t0, v.t1) for v in views.values())
    flat = [t for t0, t1 in covered for t in range(t0, t1)]
    assert flat == list(range(288))


def test_split_sum_mismatch_and_short_segment():
    ds = make_ds(t=144)
    with pytest.raises(DataError, match="sum"):
        split(ds, SplitSpec(100, 22, 23))
    views = split(ds, SplitSpec(100, 22, 22))
    assert (views["va"].t0, views["va"].t1) == (100, 122)
    with pytest.raises(DataError, match="shorter"):
        split(ds, SplitSpec(100, 22, 22), min_segment=23)


def test_split_spec_rejects_zero_segment():
    with pytest.raises(DataError):
        SplitSpec(288, 0, 0)


def test_views_are_read_only():
    ds = make_ds()
    views = split(ds, SplitSpec(4, 3, 3))
    with pytest.raises(ValueError):
        views["tr"].values[0, 0, 0] = 1.0


# ---------------------------------------------------------------------------
# imputation and standardization
# ---------------------------------------------------------------------------


def test_standardizer_matches_hand_computation():
    # one component whose observed TRAIN entries are {1, 2, 3}
    values = np.array([[[1.0], [2.0], [3.0], [0.5], [0.5], [0.5]]])
    ds = MtsDataset(values)
    std, out = fit_impute_standardize(ds, SplitSpec(3, 2, 1))
    assert std.mu[0] == pytest.approx(2.0)
    assert std.sigma[0] == pytest.approx(np.sqrt(2.0 / 3.0 + 1e-8))
    assert out.values[0, 2, 0] == pytest.approx((3.0 - 2.0) / np.sqrt(2.0 / 3.0 + 1e-8))


def test_missing_val_cell_imputed_to_zero():
    ds = make_ds(n=2, t=10, p=2, missing=[(0, 5, 1)])  # time 5 is in VAL below
    _, out = fit_impute_standardize(ds, SplitSpec(4, 3, 3))
    assert out.values[0, 5, 1] == pytest.approx(0.0)
    assert not out.mask[0, 5, 1]
    assert np.isfinite(out.values).all()  # no missing values remain anywhere


def test_median_imputation_variant():
    values = np.array([[[1.0], [1.0], [10.0], [np.nan], [2.0], [2.0]]])
    ds = MtsDataset(values)
    std_mean, out_mean = fit_impute_standardize(ds, SplitSpec(3, 2, 1))
    _, out_med = fit_impute_standardize(ds, SplitSpec(3, 2, 1), impute="median")
    # fill value differs (mean 4 vs median 1), standardization stays mean-based
    assert out_mean.values[0, 3, 0] == pytest.approx(0.0)
    filled_med = out_med.values[0, 3, 0] * std_mean.sigma[0] + std_mean.mu[0]
    assert filled_med == pytest.approx(1.0)


def test_component_fully_missing_on_train_raises():
    ds = make_ds(n=1, t=6, p=2,
                 missing=[(0, 0, 1), (0, 1, 1), (0, 2, 1)])
    with pytest.raises(DataError, match="component 1"):
        fit_impute_standardize(ds, SplitSpec(3, 2, 1))


def test_train_only_statistics_bitwise_invariant():
    ds = make_ds(n=3, t=30, p=4, seed=1)
    spec = SplitSpec(20, 5, 5)
    std_a, _ = fit_impute_standardize(ds, spec)
    tampered = ds.copy()
    tampered.values[:, 20:, :] = 123.456
    std_b, _ = fit_impute_standardize(tampered, spec)
    assert np.array_equal(std_a.mu, std_b.mu)
    assert np.array_equal(std_a.sigma, std_b.sigma)


def test_standardized_train_moments():
    ds = make_ds(n=4, t=50, p=3, seed=2)
    spec = SplitSpec(30, 10, 10)
    _, out = fit_impute_standardize(ds, spec)
    tr = out.values[:, :30, :].reshape(-1, 3)
    assert np.all(np.abs(tr.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(tr.var(axis=0) - 1.0) < 1e-6)


# ---------------------------------------------------------------------------
# window enumeration
# ---------------------------------------------------------------------------


def windows_for(t_train=200, t_val=40, t_test=48, tag="tr", w=12, h=1):
    ds = make_ds(n=1, t=t_train + t_val + t_test, p=1)
    views = split(ds, SplitSpec(t_train, t_val, t_test))
    return enumerate_windows(views[tag], w, [h]).end_times[h]


def test_train_window_count_and_range():
    ends = windows_for(tag="tr", w=12, h=1)
    # 1-based {12..199}: both window and target inside TRAIN
    assert ends[0] == 11 and ends[-1] == 198 and len(ends) == 188


def test_val_windows_cross_boundary_backward():
    ends = windows_for(tag="va", w=12, h=1)
    # 1-based end-times 200..239 for targets 201..240
    assert ends[0] == 199 and ends[-1] == 238 and len(ends) == 40


def test_val_too_short_for_horizon_gives_empty_index():
    ds = make_ds(n=1, t=200 + 5 + 40, p=1)
    views = split(ds, SplitSpec(200, 5, 40))
    idx = enumerate_windows(views["va"], 12, [6, 1])
    assert len(idx.end_times[6]) == 0
    assert len(idx.end_times[1]) == 5


def test_window_index_shared_across_series():
    ds = make_ds(n=3, t=60, p=1)
    views = split(ds, SplitSpec(40, 10, 10))
    idx = enumerate_windows(views["te"], 5, [2])
    np.testing.assert_array_equal(idx.for_series(0, 2), idx.for_series(2, 2))


# ---------------------------------------------------------------------------
# prepared bundle and audit
# ---------------------------------------------------------------------------


def test_gather_shapes_and_alignment():
    ds = make_ds(n=2, t=30, p=3, seed=3)
    prepared = prepare(ds, SplitSpec(20, 5, 5))
    x, y = prepared.windows("tr", 1, 4)
    assert x.shape == (2 * 16, 4, 3) and y.shape == (2 * 16, 3)
    # first window of the first series covers times 0..3, target 4
    np.testing.assert_array_equal(x[0], prepared.dataset.values[0, 0:4])
    np.testing.assert_array_equal(y[0], prepared.dataset.values[0, 4])


def test_audit_records_phases_and_splits():
    ds = make_ds(n=2, t=30, p=2, seed=4)
    prepared = prepare(ds, SplitSpec(20, 5, 5))
    prepared.audit.set_phase("fit-global")
    prepared.windows("tr", 1, 4)
    prepared.audit.set_phase("reassign")
    prepared.windows("va", 1, 4)
    assert prepared.audit.counts("fit-global")["te"] == 0
    assert prepared.audit.counts("reassign")["te"] == 0
    assert prepared.audit.counts("reassign")["va"] > 0
    # VAL windows legitimately reach back into TRAIN
    assert prepared.audit.counts("reassign")["tr"] > 0
    assert prepared.audit.test_reads_outside() == 0
    prepared.audit.set_phase("evaluate")
    prepared.windows("te", 1, 4)
    assert prepared.audit.counts("evaluate")["te"] > 0
    assert prepared.audit.test_reads_outside(allowed=("evaluate",)) == 0
    assert prepared.audit.phases_reading("te") == ["evaluate"]


def test_trval_segment_for_refit():
    ds = make_ds(n=1, t=30, p=1)
    prepared = prepare(ds, SplitSpec(20, 5, 5))
    x, y = prepared.windows("trval", 1, 4)
    # self-contained over [0, 25): end-times 3..23
    assert len(x) == 21
    assert prepared.audit.counts(prepared.audit.phase)["te"] == 0
