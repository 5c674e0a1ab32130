import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocrl import metrics
from hydrocrl.metrics import (UndefinedMetric, coverage_and_width, mae, month_filter, nnse, nse,
                              relative_performance_profile, safe_nnse, write_profile_csv)

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestNSE:
    def test_perfect(self):
        assert nse([1.0, 4.0, 2.0], [1.0, 4.0, 2.0]) == 1.0

    def test_mean_predictor(self):
        y = np.array([1.0, 2.0, 6.0])
        assert nse(y, np.full(3, y.mean())) == 0.0

    def test_hand_value(self):
        assert nse([1, 2, 3], [1, 2, 5]) == -1.0

    def test_constant_observations(self):
        with pytest.raises(UndefinedMetric):
            nse([2.0, 2.0], [1.0, 3.0])
        assert np.isnan(safe_nnse([2.0, 2.0], [1.0, 3.0]))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            nse([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            nse([], [])

    @given(st.lists(st.tuples(finite, finite), min_size=3, max_size=20), finite)
    def test_shift_invariance(self, pairs, c):
        y, yh = map(np.array, zip(*pairs))
        if np.ptp(y) < 1e-3:
            return
        assert nse(y + c, yh + c) == pytest.approx(nse(y, yh), rel=1e-6, abs=1e-6)


class TestNNSE:
    @pytest.mark.parametrize("value, expected", [(1.0, 1.0), (0.0, 0.5), (-1.0, 1 / 3)])
    def test_values(self, value, expected):
        assert nnse(value) == expected

    def test_above_one(self):
        with pytest.raises(ValueError):
            nnse(1.5)

    @given(st.floats(-1e6, 1.0), st.floats(-1e6, 1.0))
    def test_monotone_bounded(self, a, b):
        lo, hi = sorted((a, b))
        assert 0 < nnse(lo) <= nnse(hi) <= 1


class TestMAE:
    def test_values(self):
        assert mae([3.0, 1.0], [3.0, 1.0]) == 0.0
        assert mae([0, 10], [1, 7]) == 2.0

    def test_empty(self):
        with pytest.raises(ValueError):
            mae([], [])

    @given(st.lists(st.tuples(finite, finite), min_size=1, max_size=20), st.floats(-10, 10))
    def test_homogeneous(self, pairs, c):
        y, yh = map(np.array, zip(*pairs))
        assert mae(c * y, c * yh) == pytest.approx(abs(c) * mae(y, yh), rel=1e-9, abs=1e-9)


class TestCoverage:
    def test_all_inside(self):
        assert coverage_and_width([1.0, 2.0], [0.0, 1.0], [2.0, 3.0])[0] == 100.0

    def test_half(self):
        y = np.array([0.0, 1.0, 10.0, -10.0])
        assert coverage_and_width(y, y - 2, y + 2) == (100.0, 4.0)
        lower = np.array([-2.0, -1.0, 0.0, 0.0])
        assert coverage_and_width(y, lower, lower + 4) == (50.0, 4.0)

    def test_degenerate(self):
        y = np.array([1.0, 5.0, 2.5])
        assert coverage_and_width(y, y, y) == (100.0, 0.0)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            coverage_and_width([1.0], [0.0, 0.0], [1.0, 1.0])

    @given(st.lists(st.tuples(finite, finite, st.floats(0, 50), st.floats(0, 5)), min_size=1, max_size=30))
    def test_widening_never_reduces_coverage(self, rows):
        y, c, w, extra = map(np.array, zip(*rows))
        base = coverage_and_width(y, c - w, c + w)[0]
        assert coverage_and_width(y, c - w - extra, c + w + extra)[0] >= base


class TestMonthFilter:
    def test_high_flow_count(self):
        months = np.arange(1, 13)
        mask, kept = month_filter(months, months)
        assert mask.sum() == 5 and list(kept) == [3, 4, 5, 6, 7]

    def test_identity(self):
        months = (np.arange(24) + 9) % 12 + 1
        y = np.arange(24.0)
        _, out = month_filter(months, y, keep=range(1, 13))
        assert np.array_equal(out, y)

    def test_slicing_oracle(self):
        rng = np.random.default_rng(3)
        months = (np.arange(36) + 9) % 12 + 1
        y, yh = rng.gamma(2, 10, 36), rng.gamma(2, 10, 36)
        _, fy, fyh = month_filter(months, y, yh)
        idx = [i for i, m in enumerate(months) if 3 <= m <= 7]
        assert nse(fy, fyh) == nse(y[idx], yh[idx])

    @pytest.mark.parametrize("bad", [(), (0,), (13,)])
    def test_bad_months(self, bad):
        with pytest.raises(ValueError):
            month_filter(np.arange(1, 13), keep=bad)


def _brute_profile(errors):
    names = list(errors)
    E = np.array([errors[k] for k in names], dtype=float)
    gaps = E - E.min(axis=0)
    out = {}
    for name, g in zip(names, gaps):
        out[name] = [(x, np.mean([gi <= x for gi in g])) for x in sorted(set(g))]
    return out


class TestProfile:
    def test_single_model(self):
        curve = relative_performance_profile({"a": [1.0, 5.0, 2.0]})["a"]
        assert curve.tolist() == [[0.0, 1.0]]

    def test_dominance(self):
        prof = relative_performance_profile({"A": [1.0, 1.0, 2.0], "B": [2.0, 4.0, 2.5]})
        assert prof["A"].tolist() == [[0.0, 1.0]]
        assert prof["B"][-1].tolist() == [3.0, 1.0]

    def test_three_models_brute_force(self):
        errors = {"p": [1.0, 4.0, 2.0, 3.0], "q": [2.0, 1.0, 2.0, 5.0], "r": [1.5, 3.0, 0.5, 3.0]}
        prof = relative_performance_profile(errors)
        for name, pts in _brute_profile(errors).items():
            np.testing.assert_array_equal(prof[name], np.array(pts))

    def test_ties_are_zero_gap(self):
        prof = relative_performance_profile({"a": [1.0, 2.0], "b": [1.0, 2.0]})
        assert prof["a"].tolist() == prof["b"].tolist() == [[0.0, 1.0]]

    @settings(max_examples=50)
    @given(st.integers(1, 4), st.integers(1, 8), st.randoms(use_true_random=False))
    def test_curve_shape(self, n_models, n_cases, rnd):
        errors = {f"m{i}": [rnd.uniform(0, 10) for _ in range(n_cases)] for i in range(n_models)}
        for curve in relative_performance_profile(errors).values():
            assert np.all(np.diff(curve[:, 0]) > 0)
            assert np.all(np.diff(curve[:, 1]) >= 0)
            assert curve[-1, 1] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            relative_performance_profile({})
        with pytest.raises(ValueError):
            relative_performance_profile({"a": []})

    def test_csv(self, tmp_path):
        curve = relative_performance_profile({"a": [1.0, 2.0], "b": [2.0, 2.0]})["b"]
        path = write_profile_csv(curve, tmp_path / "p.csv")
        assert path.read_text().splitlines() == ["mae_gap,fraction", "0.0,0.5", "1.0,1.0"]


def test_exhaustive_profile_permutations():
    # the curve does not depend on case order
    errors = {"a": [3.0, 1.0, 2.0], "b": [1.0, 2.0, 2.0]}
    ref = relative_performance_profile(errors)
    for perm in itertools.permutations(range(3)):
        p = relative_performance_profile({k: [v[i] for i in perm] for k, v in errors.items()})
        for k in ref:
            np.testing.assert_array_equal(p[k], ref[k])


def test_module_exports():
    assert metrics.HIGH_FLOW_MONTHS == (3, 4, 5, 6, 7)
