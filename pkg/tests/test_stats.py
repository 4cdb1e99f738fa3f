import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import kolmogorov

from rttd.stats import (
    MAD_CONSISTENCY,
    anomaly_index,
    kolmogorov_sf,
    ks_statistic,
    ks_two_sample,
    mad,
    median,
    min_variance_window,
    quantile,
    sample_variance,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
samples = st.lists(finite, min_size=1, max_size=40)


def brute_ecdf_sup(a, b):
    a, b = np.asarray(a), np.asarray(b)
    best = 0.0
    for x in np.concatenate([a, b]):
        fa = np.count_nonzero(a <= x) / a.size
        fb = np.count_nonzero(b <= x) / b.size
        best = max(best, abs(fa - fb))
    return best


def lam_for(d, na, nb):
    ne = na * nb / (na + nb)
    return (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * d


def test_identical_samples():
    r = ks_two_sample([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_disjoint_supports():
    assert ks_two_sample([0, 0, 0], [1, 1, 1]).statistic == 1.0


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])
    with pytest.raises(ValueError):
        ks_two_sample([1.0], [])


def test_statistic_matches_brute_force_and_p_matches_scipy():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = rng.normal(size=rng.integers(1, 30))
        b = rng.normal(0.3, 1.2, size=rng.integers(1, 30))
        if rng.random() < 0.3:  # force ties
            a = np.round(a, 1)
            b = np.round(b, 1)
        r = ks_two_sample(a, b)
        assert r.statistic == brute_ecdf_sup(a, b)
        expected = min(1.0, float(kolmogorov(lam_for(r.statistic, a.size, b.size))))
        assert abs(r.p_value - expected) <= 1e-9


def test_kolmogorov_series_edges():
    assert kolmogorov_sf(0.0) == 1.0
    assert kolmogorov_sf(-1.0) == 1.0
    assert 0.0 <= kolmogorov_sf(50.0) < 1e-300
    assert kolmogorov_sf(1e-38) == 1.0
    for lam in (1e-6, 0.05, 0.19, 0.2, 0.21, 0.3, 0.5, 1.0, 1.36, 2.0, 3.0):
        assert abs(kolmogorov_sf(lam) - min(1.0, kolmogorov(lam))) <= 1e-12


@given(samples, samples)
def test_ks_symmetric(a, b):
    assert ks_two_sample(a, b) == ks_two_sample(b, a)


ints = st.lists(st.integers(-1000, 1000), min_size=1, max_size=40)


@given(ints, ints)
def test_ks_invariant_under_increasing_transform(a, b):
    # cubes and affine maps of small integers stay exact in float64
    f = lambda v: np.asarray(v, dtype=np.float64) ** 3 * 2 + 5
    assert ks_statistic(a, b) == ks_statistic(f(a), f(b))


@given(st.integers(1, 30), st.integers(1, 30), st.floats(0, 1), st.floats(0, 1))
def test_p_non_increasing_in_d(na, nb, d1, d2):
    lo, hi = sorted((d1, d2))
    assert kolmogorov_sf(lam_for(hi, na, nb)) <= kolmogorov_sf(lam_for(lo, na, nb))


@given(samples, samples)
def test_p_in_unit_interval(a, b):
    r = ks_two_sample(a, b)
    assert 0.0 <= r.statistic <= 1.0
    assert 0.0 < r.p_value <= 1.0


def test_median_and_mad_examples():
    assert median([1, 2, 3, 4, 100]) == 3
    assert mad([1, 2, 3, 4, 100]) == 1
    assert mad([5, 5, 5]) == 0
    assert median([1, 2]) == 1.5
    with pytest.raises(ValueError):
        median([])
    with pytest.raises(ValueError):
        mad([])


def test_anomaly_index_examples():
    ref = [1, 2, 3, 4, 100]
    assert anomaly_index(3, ref) == 0
    assert anomaly_index(100, ref) == pytest.approx(97 / 1.4826)
    assert anomaly_index(100, ref) == pytest.approx(65.42, abs=0.01)
    assert anomaly_index(4, [2, 2, 2]) == math.inf
    assert anomaly_index(2, [2, 2, 2]) == 0
    assert MAD_CONSISTENCY == 1.4826
    with pytest.raises(ValueError):
        anomaly_index(1.0, [])


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30), st.integers(-1000, 1000),
       st.integers(-10**6, 10**6))
def test_anomaly_index_translation_invariant(ref, x, c):
    # integers keep the shifted arithmetic exact
    a = anomaly_index(float(x), [float(v) for v in ref])
    b = anomaly_index(float(x + c), [float(v + c) for v in ref])
    assert a == b


def test_quantile_linear_interpolation():
    assert quantile([1, 2, 3, 4], 0.75) == 3.25
    assert quantile([5], 0.75) == 5
    assert quantile([1, math.inf], 0.5) == math.inf


def test_sample_variance_matches_numpy():
    v = [1.0, 2.5, 4.0, 7.0]
    assert sample_variance(v) == pytest.approx(np.var(v, ddof=1))
    assert sample_variance([3.0]) == 0.0


def test_window_examples():
    w = min_variance_window([1, 1.1, 1.2, 5, 9, 20], 3)
    assert w.start_index == 0 and w.values == (1, 1.1, 1.2)
    w = min_variance_window([2.0] * 8, 4)
    assert w.variance == 0 and w.start_index == 0
    assert min_variance_window([1.0, 2.0], 1).variance == 0.0


def test_window_errors():
    with pytest.raises(ValueError):
        min_variance_window([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        min_variance_window([2.0, 1.0], 1)
    with pytest.raises(ValueError):
        min_variance_window([1.0, 2.0], 0)


def exhaustive_window(values, w):
    """Variance of every window, computed directly; returns (best start, best variance)."""
    values = np.asarray(values, dtype=np.float64)
    if w == 1:
        return 0, 0.0
    vars_ = np.var(np.lib.stride_tricks.sliding_window_view(values, w), axis=1, ddof=1)
    return int(np.argmin(vars_)), float(vars_.min())


def test_window_matches_exhaustive_on_1000_values():
    rng = np.random.default_rng(3)
    v = np.sort(rng.exponential(size=1000))
    assert min_variance_window(v, 10).start_index == exhaustive_window(v, 10)[0]


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=2000), st.data())
def test_window_matches_exhaustive(values, data):
    values = np.sort(np.array(values))
    w = data.draw(st.integers(1, values.size))
    sel = min_variance_window(values, w)
    _, best = exhaustive_window(values, w)
    assert sel.length == w
    assert sel.values == tuple(values[sel.start_index:sel.start_index + w])
    assert sel.variance == pytest.approx(best, rel=1e-9, abs=1e-9)


def test_window_exact_on_200_random_arrays():
    rng = np.random.default_rng(11)
    for _ in range(200):
        v = np.sort(rng.integers(0, 50, size=rng.integers(2, 60)).astype(float))
        w = int(rng.integers(1, v.size + 1))
        assert min_variance_window(v, w).variance == pytest.approx(exhaustive_window(v, w)[1], abs=1e-9)
