"""Metrics against independent oracles (scipy.stats and direct formulas)."""

import math

import numpy as np
import pytest
import scipy.stats

from pathflow import (
    MetricsReport,
    UncertaintyReport,
    compute_metrics_report,
    gaussian_nll,
    interval_coverage,
    pcc,
    per_gene_pcc,
    per_gene_rmse,
    point_prediction,
    rmse,
    select_top_k,
    spearman,
    variance_error_spearman,
)
from pathflow.metrics import VAR_FLOOR, _average_ranks


class TestPcc:
    def test_against_scipy(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            a = rng.normal(size=n)
            b = rng.normal(size=n) + 0.5 * a
            expected = scipy.stats.pearsonr(a, b).statistic
            assert pcc(a, b) == pytest.approx(expected, rel=1e-10)

    def test_perfect_and_anti_correlation(self):
        x = np.array([1.0, 2.0, 3.0])
        assert pcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)
        assert pcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_column_is_nan(self):
        assert math.isnan(pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))
        assert math.isnan(pcc([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]))

    def test_validation(self):
        with pytest.raises(ValueError):
            pcc([1.0], [1.0])
        with pytest.raises(ValueError):
            pcc([1.0, 2.0], [1.0, 2.0, 3.0])


class TestRmse:
    def test_against_direct_formula(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            a, b = rng.normal(size=n), rng.normal(size=n)
            assert rmse(a, b) == pytest.approx(
                np.sqrt(np.mean((a - b) ** 2)), rel=1e-12
            )

    def test_zero_for_identical_columns(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0


class TestPerGene:
    def test_columnwise_agreement(self):
        rng = np.random.default_rng(23)
        pred = rng.normal(size=(15, 6))
        truth = rng.normal(size=(15, 6))
        p = per_gene_pcc(pred, truth)
        r = per_gene_rmse(pred, truth)
        for g in range(6):
            assert p[g] == pytest.approx(
                scipy.stats.pearsonr(pred[:, g], truth[:, g]).statistic, rel=1e-10
            )
            assert r[g] == pytest.approx(rmse(pred[:, g], truth[:, g]), rel=1e-12)

    def test_nan_marks_constant_columns(self):
        pred = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        truth = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        p = per_gene_pcc(pred, truth)
        assert math.isnan(p[0]) and p[1] == pytest.approx(1.0)


def _top_k_oracle(fold_pcc, k):
    """Sort by (-mean of defined entries, gene index); take the first k."""
    fold_pcc = np.atleast_2d(np.asarray(fold_pcc, dtype=np.float64))
    keyed = []
    for g in range(fold_pcc.shape[1]):
        col = fold_pcc[:, g]
        defined = col[~np.isnan(col)]
        if defined.size:
            keyed.append((-defined.mean(), g))
    keyed.sort()
    if k > len(keyed):
        raise ValueError("k exceeds eligible genes")
    return np.array([g for _, g in keyed[:k]])


class TestSelectTopK:
    def test_against_sort_oracle_with_ties_and_nans(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            folds = int(rng.integers(1, 5))
            genes = int(rng.integers(3, 25))
            # quantized values force ties; sprinkle NaNs for undefined folds
            m = np.round(rng.normal(size=(folds, genes)), 1)
            m[rng.random(m.shape) < 0.2] = np.nan
            eligible = int((~np.isnan(m)).any(axis=0).sum())
            if eligible == 0:
                continue
            k = int(rng.integers(1, eligible + 1))
            np.testing.assert_array_equal(select_top_k(m, k), _top_k_oracle(m, k))

    def test_tie_break_by_gene_index(self):
        m = np.array([[0.5, 0.9, 0.9, 0.1]])
        np.testing.assert_array_equal(select_top_k(m, 3), [1, 2, 0])

    def test_one_dimensional_input_is_a_single_fold(self):
        np.testing.assert_array_equal(select_top_k(np.array([0.1, 0.7]), 1), [1])

    def test_requesting_more_than_eligible_raises(self):
        m = np.array([[0.5, np.nan], [0.4, np.nan]])
        with pytest.raises(ValueError, match="only 1"):
            select_top_k(m, 2)


class TestPointPrediction:
    def test_modes_match_numpy(self):
        rng = np.random.default_rng(25)
        s = rng.normal(size=(9, 4))
        np.testing.assert_array_equal(point_prediction(s, "mean"), s.mean(axis=0))
        np.testing.assert_array_equal(point_prediction(s, "median"), np.median(s, axis=0))
        np.testing.assert_array_equal(point_prediction(s, "single"), s[0])

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            point_prediction(np.zeros((2, 2)), "mode7")


class TestIntervalCoverage:
    def test_matches_quantile_oracle(self):
        rng = np.random.default_rng(26)
        for _ in range(50):
            s, n, g = int(rng.integers(1, 6)), int(rng.integers(10, 40)), int(rng.integers(1, 5))
            ens = rng.normal(size=(s, n, g))
            truth = rng.normal(size=(s, g))
            got = interval_coverage(ens, truth, levels=(0.5, 0.8))
            for level in (0.5, 0.8):
                lo = np.quantile(ens, (1 - level) / 2, axis=1)
                hi = np.quantile(ens, (1 + level) / 2, axis=1)
                expected = float(((truth >= lo) & (truth <= hi)).mean())
                assert got[level] == expected

    def test_hand_case(self):
        ens = np.arange(1.0, 11.0).reshape(1, 10, 1)
        # central 80% interval of 1..10 via linear quantiles is [1.9, 9.1]
        assert interval_coverage(ens, np.array([[5.0]]), levels=(0.8,))[0.8] == 1.0
        assert interval_coverage(ens, np.array([[1.5]]), levels=(0.8,))[0.8] == 0.0

    def test_monotone_in_level(self):
        rng = np.random.default_rng(27)
        ens = rng.normal(size=(20, 15, 3))
        truth = rng.normal(size=(20, 3))
        cov = interval_coverage(ens, truth, levels=(0.5, 0.8, 0.9))
        assert cov[0.5] <= cov[0.8] <= cov[0.9]

    def test_validation(self):
        with pytest.raises(ValueError, match="too small"):
            interval_coverage(np.zeros((1, 5, 1)), np.zeros((1, 1)))
        with pytest.raises(ValueError, match="level"):
            interval_coverage(np.zeros((1, 10, 1)), np.zeros((1, 1)), levels=(1.5,))
        with pytest.raises(ValueError, match="truths"):
            interval_coverage(np.zeros((1, 10, 2)), np.zeros((2, 2)))


class TestGaussianNll:
    def test_unit_normal_hand_value(self):
        # ensemble {-1, +1} repeated has mean 0 and population variance 1;
        # the NLL of truth 0 under N(0, 1) is log(sqrt(2*pi))
        ens = np.array([[-1.0, 1.0] * 5]).reshape(1, 10, 1)
        expected = 0.5 * math.log(2.0 * math.pi)
        assert gaussian_nll(ens, np.array([[0.0]])) == pytest.approx(expected, rel=1e-12)

    def test_against_scipy_logpdf(self):
        rng = np.random.default_rng(28)
        for _ in range(50):
            s, n, g = int(rng.integers(1, 5)), int(rng.integers(5, 20)), int(rng.integers(1, 4))
            ens = rng.normal(size=(s, n, g)) * 2.0
            truth = rng.normal(size=(s, g))
            mean = ens.mean(axis=1)
            var = np.maximum(ens.var(axis=1), VAR_FLOOR)
            expected = float(-scipy.stats.norm.logpdf(truth, mean, np.sqrt(var)).mean())
            assert gaussian_nll(ens, truth) == pytest.approx(expected, rel=1e-10)

    def test_degenerate_ensemble_uses_the_floor(self):
        ens = np.full((1, 5, 1), 2.0)
        err = 0.5
        expected = 0.5 * math.log(2.0 * math.pi * VAR_FLOOR) + err**2 / (2 * VAR_FLOOR)
        assert gaussian_nll(ens, np.array([[2.5]])) == pytest.approx(expected, rel=1e-12)

    def test_needs_two_members(self):
        with pytest.raises(ValueError, match=">= 2"):
            gaussian_nll(np.zeros((1, 1, 1)), np.zeros((1, 1)))


class TestSpearman:
    def test_ranks_match_scipy_rankdata(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            v = np.round(rng.normal(size=int(rng.integers(3, 30))), 1)
            np.testing.assert_array_equal(
                _average_ranks(v), scipy.stats.rankdata(v, method="average")
            )

    def test_against_scipy_spearmanr(self):
        rng = np.random.default_rng(30)
        for _ in range(50):
            n = int(rng.integers(3, 40))
            a = np.round(rng.normal(size=n), 1)
            b = np.round(rng.normal(size=n) + 0.3 * a, 1)
            expected = scipy.stats.spearmanr(a, b).statistic
            got = spearman(a, b)
            if math.isnan(expected):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(expected, rel=1e-10)

    def test_degenerate_is_nan(self):
        assert math.isnan(spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]))

    def test_variance_error_spearman_pipeline(self):
        rng = np.random.default_rng(31)
        ens = rng.normal(size=(8, 12, 5))
        truth = rng.normal(size=(8, 5))
        var = ens.var(axis=1).ravel()
        err = np.abs(truth - ens.mean(axis=1)).ravel()
        expected = scipy.stats.spearmanr(var, err).statistic
        assert variance_error_spearman(ens, truth) == pytest.approx(expected, rel=1e-10)


class TestReports:
    def test_compute_metrics_report(self):
        rng = np.random.default_rng(32)
        pred = rng.normal(size=(20, 6))
        truth = pred + 0.1 * rng.normal(size=(20, 6))
        pred[:, 0] = 1.0  # constant prediction column -> undefined PCC
        report = compute_metrics_report(pred, truth, [f"g{i}" for i in range(6)],
                                        top_k_sizes=(10, 5, 2))
        assert report.undefined_pcc_count == 1
        # 10 exceeds the 5 eligible genes and is skipped, not an error
        assert sorted(report.top_k) == [2, 5]
        best2 = select_top_k(np.asarray(report.pcc_per_gene)[None, :], 2)
        assert report.top_k[2]["mean_pcc"] == pytest.approx(
            np.mean(np.asarray(report.pcc_per_gene)[best2]), rel=1e-12
        )

    def test_report_json_replaces_nan_with_null(self):
        report = MetricsReport(
            genes=("a", "b"),
            pcc_per_gene=[float("nan"), 0.5],
            rmse_per_gene=[0.1, 0.2],
            undefined_pcc_count=1,
        )
        payload = report.to_json()
        assert payload["pcc_per_gene"] == [None, 0.5]

    def test_uncertainty_json_keys_round_trip(self):
        rep = UncertaintyReport(coverage={0.5: 0.49, 0.9: 0.92}, nll=1.2,
                                spearman_var_err=float("nan"))
        payload = rep.to_json()
        assert payload["coverage"] == {"0.5": 0.49, "0.9": 0.92}
        assert payload["spearman_var_err"] is None
