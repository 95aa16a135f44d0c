import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adjusted_rand, mountain_valley, stations_in_box, template
from stfda.clustering import (_standardize, assign_weekly, correlation_distance, kmeans_curves, median_curve,
                              read_station_labels)

H = np.linspace(0, 24, 97)
BASE = 5 + 3 * np.sin(2 * np.pi * H / 24)


def _dataset(curves_per_day, mask=None):
    """One station; ``curves_per_day`` is (T, q) starting on a Monday."""
    arr = np.asarray(curves_per_day, dtype=float)
    ds = template(stations_in_box(1, 0), arr.shape[0], arr.shape[1], start=dt.date(2017, 5, 8))
    return ds.with_values(arr[None], None if mask is None else mask[None])


def test_median_single_day_and_shifts():
    ds = _dataset([BASE])
    np.testing.assert_array_equal(median_curve(ds, 0, 0), BASE)
    curves = np.zeros((15, H.size))
    curves[0], curves[7], curves[14] = BASE, BASE + 10, BASE - 10
    np.testing.assert_allclose(median_curve(_dataset(curves), 0, 0), BASE)


def test_median_resists_outlier_day():
    rng = np.random.default_rng(0)
    T = 7 * 26
    curves = np.tile(BASE, (T, 1)) + 0.05 * rng.standard_normal((T, H.size))
    mondays = np.arange(0, T, 7)
    curves[mondays[3]] = 100.0  # one wild Monday among 26
    med = median_curve(_dataset(curves), 0, 0)
    # direct oracle: median over the 25 clean Mondays plus the outlier
    oracle = np.sort(curves[mondays], axis=0)[len(mondays) // 2 - 1: len(mondays) // 2 + 1].mean(axis=0)
    np.testing.assert_allclose(med, oracle)
    step = np.max(np.abs(np.diff(BASE)))
    assert np.max(np.abs(med - BASE)) < step


def test_median_uses_observed_cells_only():
    curves = np.tile(BASE, (8, 1))
    curves[7] = 50.0
    mask = np.ones(curves.shape, bool)
    mask[7] = False
    np.testing.assert_allclose(median_curve(_dataset(curves, mask), 0, 0), BASE)
    mask[0] = False
    with pytest.raises(ValueError, match="no data"):
        median_curve(_dataset(curves, mask), 0, 0)


def test_distance_examples():
    a = BASE
    assert correlation_distance(a, a) == pytest.approx(0, abs=1e-15)
    assert correlation_distance(a, -a) == pytest.approx(2, abs=1e-15)
    assert correlation_distance(a, a + 17) == pytest.approx(0, abs=1e-15)
    with pytest.raises(ValueError):
        correlation_distance(a, np.ones_like(a))
    with pytest.raises(ValueError):
        correlation_distance([1.0], [2.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_distance_symmetric_bounded_and_affine_invariant(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 12))
    d = correlation_distance(a, b)
    assert 0 <= d <= 2
    assert d == correlation_distance(b, a)
    assert correlation_distance(scale * a + shift, b) == pytest.approx(d, abs=1e-12)
    # the standardized form of a curve is unchanged by positive affine maps
    np.testing.assert_allclose(_standardize(scale * a + shift), _standardize(a), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mountain_valley_perfect_separation(seed):
    X, group = mountain_valley(12, seed)
    res = kmeans_curves(X, 2, seed=seed, midday_index=int(np.argmin(np.abs(H - 12))))
    assert adjusted_rand(res.labels, group) == 1.0
    # mountains peak at midday, so canonicalization puts them in cluster 1
    assert set(res.labels[group == 0]) == {1}


def test_k_equals_n():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((5, 20))
    res = kmeans_curves(X, 5, seed=0)
    assert sorted(res.labels) == [1, 2, 3, 4, 5]
    assert res.total == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        kmeans_curves(X, 6)


def test_scaling_a_member_keeps_its_label():
    X, _ = mountain_valley(8, 3)
    a = kmeans_curves(X, 2, seed=4)
    Y = X.copy()
    Y[5] *= 3
    b = kmeans_curves(Y, 2, seed=4)
    assert b.labels[5] == a.labels[5]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_objective_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 10)).cumsum(axis=1)
    res = kmeans_curves(X, k, seed=seed, restarts=1)
    hist = np.array(res.history)
    assert np.all(np.diff(hist) <= 1e-10)
    assert res.total <= hist[0] + 1e-10
    assert res.centres.shape == (k, 10)
    for j in range(k):
        np.testing.assert_allclose(res.centres[j], X[res.labels == j + 1].mean(axis=0))


def test_canonical_labels_independent_of_order():
    X, group = mountain_valley(10, 7)
    perm = np.random.default_rng(0).permutation(len(X))
    a = kmeans_curves(X, 2, seed=1)
    b = kmeans_curves(X[perm], 2, seed=99)
    np.testing.assert_array_equal(a.labels[perm], b.labels)
    assert a.centres[0, 48] > a.centres[1, 48]


def _weekly(n_each=6, weeks=2, seed=0):
    X, group = mountain_valley(n_each, seed, h=np.linspace(0, 23.75, 96))
    n = len(X)
    ds = template(stations_in_box(n, seed), 7 * weeks, 96, start=dt.date(2017, 5, 8))
    vals = np.repeat(X[:, None, :], 7 * weeks, axis=1)
    return ds.with_values(vals), group


def test_assign_weekly_counts_and_shares(tmp_path):
    ds, group = _weekly()
    res = assign_weekly(ds, seed=3)
    counts = res.counts
    assert np.all(counts.max(axis=1) == 7)
    np.testing.assert_array_equal(res.majority, group + 1)
    np.testing.assert_allclose(res.shares, [0.5, 0.5])
    res.write(tmp_path)
    labels = read_station_labels(tmp_path / "station_labels.csv")
    assert labels == res.majority_labels()
    rows = (tmp_path / "clusters.csv").read_text().splitlines()
    assert rows[0] == "station,weekday,label" and len(rows) == 1 + 7 * ds.n


def test_assign_weekly_missing_weekday():
    ds, group = _weekly()
    mask = ds.observed_mask.copy()
    mask[0, ds.weekdays == 2] = False  # station 0 never seen on Wednesdays
    res = assign_weekly(ds.with_values(ds.values, mask))
    assert res.weekday_labels[2, 0] == 0
    assert res.counts[0].sum() == 6
    assert res.majority[0] == group[0] + 1


def test_majority_tie_goes_to_cluster_two():
    from stfda.clustering import ClusterResult
    wl = np.zeros((7, 2), int)
    wl[:3, 0], wl[3:6, 0] = 1, 2
    wl[:, 1] = 1
    r = ClusterResult(["a", "b"], H, wl, {}, 2)
    assert r.majority.tolist() == [2, 1]
