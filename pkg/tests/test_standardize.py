import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dendrorecon import standardize
from dendrorecon.ingest import RingWidthDataset


def test_negexp_matches_log_linear_regression():
    rng = np.random.default_rng(0)
    age = np.arange(1, 41, dtype=float)
    w = np.exp(0.8 - 0.02 * age + 0.1 * rng.standard_normal(40))
    fit = standardize.fit_negexp(w, age)
    ref = stats.linregress(age, np.log(w))
    assert fit.c1 == pytest.approx(ref.slope, rel=1e-12)
    assert fit.c0 == pytest.approx(ref.intercept, rel=1e-12)
    assert not fit.fallback
    np.testing.assert_allclose(fit(age), np.exp(ref.intercept + ref.slope * age))


def test_negexp_increasing_trend_falls_back_to_mean():
    w = np.array([1.0, 1.1, 1.3, 1.2, 1.5])
    fit = standardize.fit_negexp(w, np.arange(1, 6))
    assert fit.fallback
    np.testing.assert_allclose(fit(np.arange(1, 6)), w.mean())


def test_negexp_ignores_nan_and_rejects_short():
    w = np.array([2.0, np.nan, 1.5, 1.2, 1.0])
    fit = standardize.fit_negexp(w, np.arange(1, 6))
    ref = standardize.fit_negexp(w[~np.isnan(w)], np.array([1, 3, 4, 5]))
    assert fit == ref
    with pytest.raises(ValueError):
        standardize.fit_negexp([1.0, 0.9], [1, 2])


def test_age_bins():
    np.testing.assert_array_equal(standardize.age_bin(np.arange(1, 13), 5), [1] * 5 + [2] * 5 + [3] * 2)
    with pytest.raises(ValueError):
        standardize.age_bin([1, 2], 0)


def test_rcs_curve_averages_raw_widths(small_dataset):
    curve = standardize.rcs_curve(small_dataset, bin_width=5)
    w = small_dataset.widths
    assert curve[1] == pytest.approx(np.mean(np.concatenate([w[0][:5], w[1][:5], w[2][:5]])))
    assert curve[2] == pytest.approx(np.mean(np.concatenate([w[0][5:], w[1][5:]])))
    assert set(curve) == {1, 2}


def test_ts_chronology_is_mean_of_indices(small_dataset):
    chron = standardize.standardize(small_dataset, "ts")
    idx, fits = standardize.ts_index(small_dataset)
    # year 1996 (index 6): every tree present
    expected = np.mean([idx[0][6], idx[1][4], idx[2][1]])
    assert chron.z[6] == pytest.approx(expected)
    np.testing.assert_array_equal(chron.sample_depth, small_dataset.depth())
    assert chron.method == "TS"


def test_chronology_nan_where_no_tree():
    d = RingWidthDataset(("a", "b"), np.array([0, 6]), np.array([3, 9]),
                         (np.array([2.0, 1.8, 1.7, 1.5]), np.array([1.5, 1.4, 1.3, 1.1])))
    chron = standardize.standardize(d, "rcs", bin_width=2)
    assert np.isnan(chron.z[4:6]).all()
    assert np.isfinite(chron.z[[0, 3, 6, 9]]).all()
    assert chron.sample_depth[4] == 0


def test_unknown_method(small_dataset):
    with pytest.raises(ValueError):
        standardize.standardize(small_dataset, "spline")
    with pytest.raises(ValueError):
        standardize.standardize(small_dataset, "ts", mean_fn="median")


def test_biweight_resists_outlier():
    v = np.array([1.0, 1.02, 0.98, 1.01, 0.99, 5.0])
    assert standardize.tukey_biweight(v) == pytest.approx(1.0, abs=0.01)
    assert np.mean(v) > 1.6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=20), st.floats(-3.0, 3.0))
def test_biweight_symmetric_sample_returns_center(half, center):
    v = np.array(half)
    sample = np.concatenate([center + v, center - v, [center]])
    assert standardize.tukey_biweight(sample) == pytest.approx(center, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0))
def test_indices_invariant_to_width_units(scale):
    d = RingWidthDataset(("a", "b"), np.array([0, 2]), np.array([5, 7]),
                         (np.array([2.0, 1.8, 1.9, 1.5, 1.4, 1.2]), np.array([1.5, 1.4, 1.2, 1.3, 1.0, 0.9])))
    d2 = RingWidthDataset(d.tree_ids, d.first_year, d.last_year, tuple(w * scale for w in d.widths))
    for method in ("ts", "rcs"):
        a = standardize.standardize(d, method, bin_width=2).z
        b = standardize.standardize(d2, method, bin_width=2).z
        np.testing.assert_allclose(a, b, rtol=1e-10)
