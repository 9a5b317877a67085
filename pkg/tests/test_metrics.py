import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ioucal.metrics import (BinningSpec, ace, adaptive_bins, binned_error, brier, calibration_summary, ece,
                            equal_width_bin, nll, reliability_table, sce)


def ece_fixture():
    """Bin A: 60 samples at 0.8 with precision 0.7; bin B: 40 samples at 0.3 with precision 0.4."""
    p = np.r_[np.full(60, 0.8), np.full(40, 0.3)]
    y = np.r_[np.ones(42), np.zeros(18), np.ones(16), np.zeros(24)]
    return y, p


def test_ece_fixture():
    y, p = ece_fixture()
    assert abs(ece(y, p) - 0.10) < 1e-12


def test_ece_extremes():
    assert ece(np.ones(5), np.ones(5)) == 0.0
    assert ece(np.zeros(5), np.ones(5)) == 1.0
    with pytest.raises(ValueError):
        ece([], [])


def test_bin_membership():
    idx = equal_width_bin([0.0, 0.1, 0.1000001, 0.5, 1.0], 10)
    assert idx.tolist() == [0, 0, 1, 4, 9]


def test_ace_degenerate_cases():
    y = np.array([1, 0, 1])
    p = np.array([0.2, 0.6, 0.9])
    assert ace(y, p, n_bins=10) == pytest.approx(np.mean(np.abs(p - y)), abs=1e-15)
    assert ace(y, p, n_bins=1) == pytest.approx(abs(y.mean() - p.mean()), abs=1e-15)


def test_ace_close_to_ece_on_calibrated_uniform():
    rng = np.random.default_rng(0)
    p = rng.uniform(size=100_000)
    y = rng.random(100_000) < p
    assert abs(ace(y, p) - ece(y, p)) < 0.02


def test_sce_examples():
    y, p = ece_fixture()
    assert sce(y, p, np.ones(100)) == ece(y, p)
    # class 1 has ECE 0.1, class 2 has ECE 0.3
    y2 = np.r_[np.ones(7), np.zeros(3), np.ones(2), np.zeros(8)]
    p2 = np.r_[np.full(10, 0.8), np.full(10, 0.5)]
    cats = np.r_[np.ones(10), np.full(10, 2)]
    assert sce(y2, p2, cats) == pytest.approx(0.2, abs=1e-12)


def test_nll_fixtures():
    assert abs(nll([1], [0.5]) - math.log(2)) < 1e-12
    assert nll([1, 0], [1.0, 0.0]) < 1e-10
    y = np.r_[np.ones(9), 0]
    assert nll(y, np.full(10, 0.9)) == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), abs=1e-12)
    assert nll(y, np.full(10, 0.9)) == pytest.approx(0.3251, abs=1e-4)


def test_brier_fixtures():
    assert brier([0, 1], [0.0, 1.0]) == 0.0
    assert abs(brier([0, 1, 1], [0.5, 0.5, 0.5]) - 0.25) < 1e-12
    assert brier([0, 1], [0.2, 0.8]) == pytest.approx(0.04, abs=1e-15)


samples = st.integers(1, 200).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n),
    st.lists(st.integers(1, 3), min_size=n, max_size=n)))


@settings(max_examples=100, deadline=None)
@given(samples, st.integers(0, 2**32 - 1))
def test_metric_ranges_and_invariances(data, seed):
    y, p, c = (np.asarray(v) for v in data)
    m = calibration_summary(y, p, c)
    for k in ("ECE", "ACE", "SCE"):
        assert 0.0 <= m[k] <= 1.0
    assert m["NLL"] >= 0.0 and 0.0 <= m["Brier"] <= 1.0
    perm = np.random.default_rng(seed).permutation(len(y))
    assert ece(y[perm], p[perm]) == pytest.approx(m["ECE"], abs=1e-12)
    assert ece(np.r_[y, y], np.r_[p, p]) == pytest.approx(m["ECE"], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 30))
def test_adaptive_bins_balanced(n, b):
    sizes = [len(g) for g in adaptive_bins(np.random.default_rng(n).uniform(size=n), b)]
    assert sum(sizes) == n and max(sizes) - min(sizes) <= 1


def test_ece_vanishes_on_calibrated_samples():
    rng = np.random.default_rng(1)
    p = rng.uniform(size=1_000_000)
    assert ece(rng.random(1_000_000) < p, p) < 0.01


def test_binned_error_dispatch():
    y, p = ece_fixture()
    cats = np.r_[np.ones(50), np.full(50, 2)]
    assert binned_error(y, p, BinningSpec()) == ece(y, p)
    assert binned_error(y, p, BinningSpec("adaptive_equal_count", 10)) == ace(y, p)
    assert binned_error(y, p, BinningSpec(per_class=True), cats) == sce(y, p, cats)
    with pytest.raises(ValueError):
        BinningSpec(bin_count=0)


def test_reliability_table():
    y, p = ece_fixture()
    table = reliability_table(y, p)
    assert sum(b.count for b in table.bins) == 100
    assert table.error == pytest.approx(0.10, abs=1e-12)
    filled = {round(b.bin_high, 1): (b.mean_conf, b.precision) for b in table.bins if b.count}
    assert filled[0.8] == pytest.approx((0.8, 0.7)) and filled[0.3] == pytest.approx((0.3, 0.4))
    lines = table.to_csv().splitlines()
    assert lines[0] == "bin_low,bin_high,mean_conf,precision,count" and len(lines) == 11
    adaptive = reliability_table(y, p, BinningSpec("adaptive_equal_count", 4))
    assert [b.count for b in adaptive.bins] == [25] * 4
    assert all(0 <= b.precision <= 1 for b in adaptive.bins)
