"""Tests for evaluation metrics, day splits, and isotonic calibration."""

import itertools

import numpy as np
import pytest
from scipy import stats

from pmhotspot.errors import DataError
from pmhotspot.evaluate import (
    CalibrationBin,
    IsotonicModel,
    bin_indices,
    brier,
    calibration_report,
    ece,
    exceedance_labels,
    isotonic_apply,
    isotonic_fit,
    observation_dates,
    rank_vector,
    reliability,
    spearman,
    spearman_filtered,
    split_days,
    in_test_split,
)

DAY = 86400.0


class TestSplitDays:
    def timestamps_over_days(self, n_days, per_day=5):
        rng = np.random.default_rng(0)
        return np.concatenate([
            d * DAY + rng.uniform(0, DAY, per_day) for d in range(n_days)
        ])

    def test_six_of_thirty(self):
        ts = self.timestamps_over_days(30)
        split = split_days(ts, 6, np.random.default_rng(1))
        assert len(split.test_days) == 6
        assert len(split.train_days) == 24
        assert split.test_days.isdisjoint(split.train_days)

    def test_zero_test_days(self):
        ts = self.timestamps_over_days(5)
        split = split_days(ts, 0, np.random.default_rng(1))
        assert split.test_days == frozenset()
        assert len(split.train_days) == 5

    def test_same_seed_same_split(self):
        ts = self.timestamps_over_days(20)
        a = split_days(ts, 6, np.random.default_rng(7))
        b = split_days(ts, 6, np.random.default_rng(7))
        assert a == b

    def test_too_few_dates(self):
        ts = self.timestamps_over_days(3)
        with pytest.raises(DataError):
            split_days(ts, 6, np.random.default_rng(0))

    def test_mask_splits_whole_days(self):
        ts = self.timestamps_over_days(10)
        split = split_days(ts, 3, np.random.default_rng(2))
        mask = in_test_split(ts, split)
        dates = observation_dates(ts)
        for d in set(dates):
            flags = mask[dates == d]
            assert flags.all() or not flags.any()


class TestRankVector:
    def test_permutation_ranks(self):
        v = np.array([30.0, 10.0, 20.0])
        np.testing.assert_array_equal(rank_vector(v), [3.0, 1.0, 2.0])

    def test_rank_sum_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = rng.integers(2, 50)
            v = rng.choice([1.0, 2.0, 3.0, 4.5], size=n)  # plenty of ties
            r = rank_vector(v)
            assert r.sum() == pytest.approx(n * (n + 1) / 2)

    def test_average_ties(self):
        v = np.array([5.0, 1.0, 5.0])
        np.testing.assert_array_equal(rank_vector(v), [2.5, 1.0, 2.5])

    def test_matches_scipy(self):
        rng = np.random.default_rng(4)
        v = rng.choice(np.arange(10.0), 200)
        np.testing.assert_allclose(rank_vector(v), stats.rankdata(v), atol=1e-12)


class TestSpearman:
    def test_identical_ranking(self):
        a = np.array([1.0, 5.0, 3.0, 4.0])
        assert spearman(a, a * 2 + 1) == pytest.approx(1.0)

    def test_reversed_ranking(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        assert spearman(a, -a) == pytest.approx(-1.0)

    def test_constant_input_undefined(self):
        assert spearman(np.ones(5), np.arange(5.0)) is None
        assert spearman(np.arange(5.0), np.ones(5)) is None

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(0, 1, 100)
        b = rng.normal(0, 1, 100)
        base = spearman(a, b)
        assert spearman(np.exp(a), b) == pytest.approx(base, abs=1e-12)
        assert spearman(a, b ** 3) == pytest.approx(base, abs=1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a = rng.normal(0, 1, 50)
            b = 0.5 * a + rng.normal(0, 1, 50)
            expected = stats.spearmanr(a, b).statistic
            assert spearman(a, b) == pytest.approx(expected, abs=1e-12)

    def test_ties_match_scipy(self):
        rng = np.random.default_rng(7)
        a = rng.choice([1.0, 2.0, 3.0], 80)
        b = rng.choice([1.0, 2.0, 3.0, 4.0], 80)
        expected = stats.spearmanr(a, b).statistic
        assert spearman(a, b) == pytest.approx(expected, abs=1e-12)


class TestSpearmanFiltered:
    def test_no_filter_equals_plain(self):
        rng = np.random.default_rng(8)
        h = rng.uniform(0, 1, 40)
        pm = rng.uniform(10, 90, 40)
        counts = rng.integers(0, 20, 40)
        assert spearman_filtered(h, pm, counts, -1) == spearman(h, pm)

    def test_overfiltering_returns_none(self):
        h = np.array([0.1, 0.9, 0.5])
        pm = np.array([10.0, 90.0, 50.0])
        counts = np.array([3, 5, 4])
        assert spearman_filtered(h, pm, counts, 5) is None

    def test_threshold_is_strict(self):
        h = np.array([0.1, 0.9, 0.5])
        pm = np.array([10.0, 90.0, 50.0])
        counts = np.array([3, 5, 5])
        assert spearman_filtered(h, pm, counts, 4) == spearman(h[1:], pm[1:])


class TestReliabilityBins:
    def test_bin_boundaries(self):
        scores = np.array([0.0, 0.1, 0.10000001, 0.95, 1.0])
        np.testing.assert_array_equal(bin_indices(scores), [1, 1, 2, 10, 10])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            bin_indices(np.array([1.1]))

    def test_degenerate_perfect_scores(self):
        labels = np.array([0, 1, 1, 0, 1], dtype=float)
        bins, excluded = reliability(labels, labels)
        assert excluded == 0
        for b in bins:
            if b.count:
                assert b.exc == b.conf

    def test_counts_sum_to_test_size(self):
        rng = np.random.default_rng(9)
        scores = rng.uniform(0, 1, 500)
        labels = rng.integers(0, 2, 500)
        bins, excluded = reliability(scores, labels)
        assert sum(b.count for b in bins) + excluded == 500

    def test_nan_scores_excluded_and_counted(self):
        scores = np.array([0.5, np.nan, 0.7])
        labels = np.array([1.0, 1.0, 0.0])
        bins, excluded = reliability(scores, labels)
        assert excluded == 1
        assert sum(b.count for b in bins) == 2

    def test_intervals_cover_unit_range(self):
        bins, _ = reliability(np.array([0.5]), np.array([1.0]))
        assert bins[0].lower == 0.0
        assert bins[-1].upper == 1.0
        for a, b in itertools.pairwise(bins):
            assert a.upper == b.lower


class TestBrierAndEce:
    def test_perfect_scores_zero(self):
        labels = np.array([0.0, 1.0, 1.0])
        assert brier(labels, labels) == 0.0

    def test_constant_half(self):
        rng = np.random.default_rng(10)
        labels = rng.integers(0, 2, 1000).astype(float)
        assert brier(np.full(1000, 0.5), labels) == pytest.approx(0.25)

    def test_empty_test_set_rejected(self):
        with pytest.raises(DataError):
            brier(np.empty(0), np.empty(0))

    def test_ece_zero_when_calibrated(self):
        bins = [CalibrationBin(k, (k - 1) / 10, k / 10, 5, 0.4, 0.4)
                for k in range(1, 11)]
        assert ece(bins, 50) == 0.0

    def test_ece_single_bin_identity(self):
        bins = [CalibrationBin(1, 0.0, 0.1, 20, 0.05, 0.25)]
        assert ece(bins, 20) == pytest.approx(0.2)

    def test_ece_weights_by_count(self):
        bins = [
            CalibrationBin(1, 0.0, 0.1, 30, 0.05, 0.15),
            CalibrationBin(2, 0.1, 0.2, 10, 0.15, 0.55),
        ]
        assert ece(bins, 40) == pytest.approx((30 / 40) * 0.1 + (10 / 40) * 0.4)

    def test_ece_permutation_invariant(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(0, 1, 300)
        labels = rng.integers(0, 2, 300).astype(float)
        bins_a, _ = reliability(scores, labels)
        perm = rng.permutation(300)
        bins_b, _ = reliability(scores[perm], labels[perm])
        assert ece(bins_a, 300) == pytest.approx(ece(bins_b, 300), abs=1e-12)


def exhaustive_isotonic(x, y):
    """Brute-force least-squares monotone fit on the observed-value grid.

    Enumerates all partitions of the tie-merged sequence into consecutive
    blocks fit by their weighted means, keeping the best candidate whose
    block means are non-decreasing.  Returns fitted values per unique x.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ux, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=y) / counts
    w = counts.astype(float)
    n = len(ux)
    best_sse, best_fit = np.inf, None
    for cuts in range(2 ** (n - 1)):
        edges = [0]
        edges += [i + 1 for i in range(n - 1) if cuts >> i & 1]
        edges.append(n)
        values = []
        for a, b in zip(edges, edges[1:]):
            values.append(np.average(means[a:b], weights=w[a:b]))
        if any(v2 < v1 for v1, v2 in zip(values, values[1:])):
            continue
        fit = np.empty(n)
        for (a, b), v in zip(zip(edges, edges[1:]), values):
            fit[a:b] = v
        sse = float(np.sum(w * (fit - means) ** 2))
        if sse < best_sse - 1e-15:
            best_sse, best_fit = sse, fit
    return ux, best_fit


class TestIsotonic:
    def test_monotone_input_reproduced(self):
        x = np.array([0.1, 0.4, 0.7, 0.9])
        y = np.array([0.0, 0.25, 0.5, 1.0])
        model = isotonic_fit(x, y)
        np.testing.assert_allclose(isotonic_apply(model, x), y, atol=1e-12)

    def test_two_violating_pairs_pool_to_half(self):
        model = isotonic_fit(np.array([0.2, 0.8]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(model.fitted, [0.5, 0.5])
        assert isotonic_apply(model, np.array([0.5]))[0] == pytest.approx(0.5)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(12)
        for trial in range(40):
            n = int(rng.integers(2, 13))
            x = np.round(rng.uniform(0, 1, n), 2)  # rounding forces ties
            y = rng.integers(0, 2, n).astype(float)
            if len(np.unique(x)) < 1:
                continue
            model = isotonic_fit(x, y)
            ux, oracle_fit = exhaustive_isotonic(x, y)
            np.testing.assert_allclose(isotonic_apply(model, ux), oracle_fit,
                                       atol=1e-10)

    def test_apply_is_monotone(self):
        rng = np.random.default_rng(13)
        model = isotonic_fit(rng.uniform(0, 1, 200), rng.integers(0, 2, 200))
        q = np.sort(rng.uniform(-0.2, 1.2, 100))
        out = isotonic_apply(model, q)
        assert np.all(np.diff(out) >= -1e-15)
        assert np.all((out >= 0) & (out <= 1))

    def test_clamps_outside_fitted_range(self):
        model = isotonic_fit(np.array([0.3, 0.6]), np.array([0.2, 0.9]))
        out = isotonic_apply(model, np.array([0.0, 1.0]))
        assert out[0] == pytest.approx(0.2)
        assert out[1] == pytest.approx(0.9)

    def test_rank_preservation_up_to_ties(self):
        rng = np.random.default_rng(14)
        scores = rng.uniform(0, 1, 300)
        labels = (rng.uniform(0, 1, 300) < scores ** 2).astype(float)
        model = isotonic_fit(scores, labels)
        calibrated = isotonic_apply(model, scores)
        order = np.argsort(scores)
        assert np.all(np.diff(calibrated[order]) >= -1e-15)

    def test_needs_two_pairs(self):
        with pytest.raises(ValueError):
            isotonic_fit(np.array([0.5]), np.array([1.0]))

    def test_model_validation(self):
        with pytest.raises(ValueError):
            IsotonicModel(np.array([0.1, 0.1]), np.array([0.2, 0.3]))
        with pytest.raises(ValueError):
            IsotonicModel(np.array([0.1, 0.2]), np.array([0.5, 0.3]))


class TestLabels:
    def test_strict_exceedance(self):
        labels = exceedance_labels(
            noise_free_raw=np.array([50.0, 45.0, 40.0]),
            baselines=np.array([40.0, 40.0, 40.0]),
            median_y=5.0)
        np.testing.assert_array_equal(labels, [1, 0, 0])


class TestCalibrationReport:
    def test_isotonic_reduces_ece_on_overconfident_scores(self):
        rng = np.random.default_rng(15)
        n = 8000
        scores = rng.uniform(0, 1, n)
        labels = (rng.uniform(0, 1, n) < scores ** 2).astype(float)
        half = n // 2
        report = calibration_report(scores[:half], labels[:half],
                                    scores[half:], labels[half:])
        assert report.ece_calibrated < report.ece_raw
        assert report.brier_calibrated < report.brier_raw
        assert report.n_test == half

    def test_excluded_nan_test_scores(self):
        rng = np.random.default_rng(16)
        train_s = rng.uniform(0, 1, 100)
        train_l = rng.integers(0, 2, 100).astype(float)
        test_s = np.array([0.5, np.nan, 0.8])
        test_l = np.array([1.0, 0.0, 1.0])
        report = calibration_report(train_s, train_l, test_s, test_l)
        assert report.n_excluded == 1
        assert report.n_test == 2
