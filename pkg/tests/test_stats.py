"""
Tests for evaluation statistics: classification metrics, Student-t tails,
Satterthwaite pooling, model-fit tests, vote confidence and calibration.
"""

import itertools
import math

import numpy as np
import pytest

from app.core import stats
from app.core.errors import ArgumentError, MetricError
from app.core.stats import FoldStat, Tail


def _pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ============================================================================
# Classification metrics
# ============================================================================


class TestAuroc:
    def test_worked_example(self):
        assert stats.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert stats.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for n in range(2, 21):
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            # coarse grid so ties occur
            scores = rng.integers(0, 5, n) / 4.0
            assert stats.auroc(scores, labels) == pytest.approx(
                _pair_count_auroc(scores, labels), abs=1e-12
            )

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        s = rng.random(50)
        y = rng.integers(0, 2, 50)
        assert stats.auroc(s, y) == pytest.approx(stats.auroc(np.exp(3 * s) - 7, y))

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(2)
        s = rng.random(10_000)
        y = rng.permutation(np.repeat([0, 1], 5000))
        assert stats.auroc(s, y) == pytest.approx(0.5, abs=0.02)

    def test_single_class(self):
        with pytest.raises(MetricError):
            stats.auroc([0.1, 0.9], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            stats.auroc([0.1, 0.9, 0.3], [0, 1])


class TestYouden:
    def test_perfect_classifier(self):
        op = stats.youden_operating_point([0.75, 0.75, 0.25, 0.25], [1, 1, 0, 0])
        assert op.sensitivity == 1.0
        assert op.specificity == 1.0
        assert op.youden_j == 1.0
        assert 0.25 < op.threshold <= 0.75

    def test_anti_informative_scores(self):
        op = stats.youden_operating_point([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
        assert op.balanced_accuracy >= 0.5

    def test_matches_exhaustive_thresholds(self):
        rng = np.random.default_rng(3)
        for n in range(4, 21):
            y = rng.integers(0, 2, n)
            y[:2] = [0, 1]
            s = rng.integers(0, 6, n) / 5.0
            op = stats.youden_operating_point(s, y)
            best = max(
                np.mean(s[y == 1] >= t) + np.mean(s[y == 0] < t) - 1
                for t in np.append(np.unique(s), np.inf)
            )
            assert op.youden_j == pytest.approx(best)
            assert op.balanced_accuracy == pytest.approx((op.sensitivity + op.specificity) / 2)

    def test_ties_go_to_lower_threshold(self):
        # thresholds 0.8 and 0.4 both give J = 0.5
        op = stats.youden_operating_point([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1])
        assert op.threshold == pytest.approx(0.4)


class TestSensAtSpec:
    def test_perfect_classifier(self):
        s, y = [0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]
        assert stats.sens_at_spec(s, y, 0.8) == 1.0
        assert stats.sens_at_spec(s, y, 0.9) == 1.0

    def test_constant_scores(self):
        assert stats.sens_at_spec([0.5] * 6, [0, 1, 0, 1, 0, 1], 0.8) == 0.0

    def test_random_scores_follow_diagonal(self):
        rng = np.random.default_rng(4)
        s = rng.random(10_000)
        y = np.repeat([0, 1], 5000)
        assert stats.sens_at_spec(s, y, 0.8) == pytest.approx(0.2, abs=0.03)
        assert stats.sens_at_spec(s, y, 0.9) == pytest.approx(0.1, abs=0.03)

    def test_bad_target(self):
        with pytest.raises(ArgumentError):
            stats.sens_at_spec([0.1, 0.9], [0, 1], 0.0)


def test_classification_metrics_keys():
    m = stats.classification_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert tuple(m) == stats.METRIC_NAMES
    assert m["auroc"] == pytest.approx(0.75)


# ============================================================================
# Logit and Student t
# ============================================================================


class TestLogit:
    def test_values(self):
        assert stats.logit_transform(0.5) == pytest.approx(0.0)
        assert stats.logit_transform(0.75) == pytest.approx(math.log(3.0))

    def test_antisymmetry(self):
        p = np.array([0.1, 0.3, 0.65])
        np.testing.assert_allclose(stats.logit_transform(p), -stats.logit_transform(1 - p))

    def test_clamping_is_flagged(self):
        clipped, flags = stats.clamp_probability([0.0, 0.5, 1.0], eps=1e-6)
        np.testing.assert_array_equal(flags, [True, False, True])
        assert np.all(np.isfinite(stats.logit_transform([0.0, 1.0])))


class TestStudentT:
    def test_zero_is_half(self):
        for df in (1.0, 3.5, 40.0):
            assert stats.student_t_sf(0.0, df) == pytest.approx(0.5)

    def test_cauchy(self):
        assert stats.student_t_sf(1.0, 1.0) == pytest.approx(0.25, abs=1e-12)
        assert stats.student_t_sf(-1.0, 1.0) == pytest.approx(0.75, abs=1e-12)

    def test_normal_limit(self):
        assert stats.student_t_sf(1.96, 1e6) == pytest.approx(0.025, abs=1e-4)

    def test_matches_scipy(self):
        from scipy import stats as sps

        for t, df in itertools.product([-3.0, -0.4, 0.7, 2.5, 8.0], [1.0, 2.3, 9.0, 120.0]):
            assert stats.student_t_sf(t, df) == pytest.approx(sps.t.sf(t, df), abs=1e-10)

    def test_two_sided(self):
        assert stats.two_sided_p(1.0, 1.0) == pytest.approx(0.5)
        assert stats.two_sided_p(0.0, 5.0) == pytest.approx(1.0)

    def test_bad_df(self):
        with pytest.raises(ArgumentError):
            stats.student_t_sf(1.0, 0.0)


# ============================================================================
# Satterthwaite pooling
# ============================================================================


class TestSatterthwaite:
    def test_worked_example(self):
        res = stats.satterthwaite_pool([FoldStat(0.0, 1.0, 10), FoldStat(0.0, 4.0, 20, 1)])
        assert res.se == pytest.approx(math.sqrt(0.3), abs=1e-12)
        expected_df = 0.09 / (0.1**2 / 9 + 0.2**2 / 19)
        assert res.df == pytest.approx(expected_df, rel=1e-12)
        assert res.df == pytest.approx(27.98, abs=0.01)

    def test_single_fold_reduction(self):
        res = stats.satterthwaite_pool([FoldStat(1.0, 2.5, 12)])
        assert res.se == pytest.approx(math.sqrt(2.5 / 12))
        assert res.df == pytest.approx(11.0)

    def test_equal_folds_bounded_by_total_dof(self):
        res = stats.satterthwaite_pool([FoldStat(0.0, 1.0, 10, i) for i in range(3)])
        assert res.df <= 27.0 + 1e-12

    def test_zero_variance_fallback(self):
        res = stats.satterthwaite_pool([FoldStat(0.3, 0.0, 5), FoldStat(0.3, 0.0, 7, 1)])
        assert res.zero_variance
        assert res.df == 10.0
        assert res.se == 0.0

    def test_fold_needs_two_draws(self):
        with pytest.raises(ArgumentError):
            FoldStat(0.0, 1.0, 1)
        with pytest.raises(ArgumentError):
            FoldStat.from_samples([0.4])

    def test_empty(self):
        with pytest.raises(ArgumentError):
            stats.satterthwaite_pool([])


class TestPooling:
    def test_pool_samples(self):
        folds = [np.array([0.9, 1.1, 1.0]), np.array([1.8, 2.2])]
        res = stats.pool_samples(folds)
        assert res.mean == pytest.approx(1.5)
        expected = stats.satterthwaite_pool([FoldStat.from_samples(v) for v in folds])
        assert res.se == pytest.approx(expected.se / 2)
        assert res.df == pytest.approx(expected.df)
        assert res.t == pytest.approx(res.mean / res.se)
        assert res.ci_low < res.mean < res.ci_high
        assert 0.0 <= res.p <= 1.0
        assert res.tail is Tail.TWO_SIDED

    def test_zero_mean_zero_variance(self):
        res = stats.pool_samples([np.zeros(3), np.zeros(3)], tail=Tail.GREATER)
        assert res.t == 0.0
        assert res.p == 0.5
        assert "zero-variance" in res.flags

    def test_to_dict(self):
        res = stats.pool_samples([np.array([1.0, 2.0])])
        d = res.to_dict()
        assert d["tail"] == "two-sided"
        assert d["k"] == 1


class TestModelFit:
    def test_chance_draws(self):
        res = stats.model_fit_test([np.full(30, 0.5)] * 10)
        assert res.t == 0.0
        assert res.p == pytest.approx(0.5)

    def test_strong_model(self):
        rng = np.random.default_rng(0)
        folds = [0.9 + rng.normal(0, 1e-3, 30) for _ in range(10)]
        res = stats.model_fit_test(folds)
        assert res.p < 1e-6
        assert res.significant()

    def test_below_chance_is_not_significant(self):
        rng = np.random.default_rng(1)
        folds = [0.3 + rng.normal(0, 0.01, 30) for _ in range(5)]
        assert stats.model_fit_test(folds).p > 0.5

    def test_perfect_accuracy_is_clamped(self):
        res = stats.model_fit_test([np.array([1.0, 0.9]), np.array([0.95, 1.0])])
        assert "logit-clamped" in res.flags
        assert math.isfinite(res.mean)

    @pytest.mark.slow
    @pytest.mark.timeout(600)
    def test_null_rejection_rate(self):
        """Chance classifier: H0 rejected in about 5% of repetitions."""
        rng = np.random.default_rng(2024)
        rejections = 0
        reps = 1000
        for _ in range(reps):
            folds = [rng.normal(0.5, 0.03, 30) for _ in range(10)]
            rejections += stats.model_fit_test(folds).p < stats.ALPHA
        assert abs(rejections / reps - 0.05) <= 0.015


# ============================================================================
# Confidence
# ============================================================================


class TestConfidence:
    def test_worked_example(self):
        rec = stats.prediction_confidence([3, 27])
        assert rec.predicted == 1
        assert rec.confidence == pytest.approx(0.9)
        assert not rec.tie
        assert rec.n_draws == 30

    def test_unanimous(self):
        rec = stats.prediction_confidence([30, 0])
        assert rec.predicted == 0
        assert rec.confidence == 1.0

    def test_tie_goes_to_class_zero(self):
        rec = stats.prediction_confidence([15, 15])
        assert rec.predicted == 0
        assert rec.confidence == 0.5
        assert rec.tie

    def test_no_draws(self):
        with pytest.raises(ArgumentError):
            stats.prediction_confidence([0, 0])

    def test_votes_from_probabilities(self):
        draws = np.array([[0.2, 0.7], [0.6, 0.5], [0.1, 0.9]])
        np.testing.assert_array_equal(stats.votes_from_probabilities(draws), [[2, 1], [0, 3]])

    def test_confidence_bounds(self):
        rng = np.random.default_rng(0)
        votes = stats.votes_from_probabilities(rng.random((30, 200)))
        conf = [stats.prediction_confidence(v).confidence for v in votes]
        assert min(conf) >= 0.5
        assert max(conf) <= 1.0


class TestUnseenPooling:
    def test_identical_folds(self):
        rec = stats.pool_unseen_confidence([[3, 27]] * 10)
        assert rec.votes == (30, 270)
        assert rec.confidence == pytest.approx(0.9)
        assert rec.predicted == 1
        assert rec.pooled

    def test_symmetric_split(self):
        rec = stats.pool_unseen_confidence([[30, 0]] * 5 + [[0, 30]] * 5)
        assert rec.votes == (150, 150)
        assert rec.tie
        assert rec.confidence == 0.5

    def test_one_dissenting_fold(self):
        rec = stats.pool_unseen_confidence([[29, 1]] + [[0, 30]] * 9)
        assert rec.votes == (29, 271)
        assert rec.predicted == 1
        assert rec.confidence == pytest.approx(271 / 300)

    def test_inconsistent_draw_counts(self):
        with pytest.raises(ArgumentError):
            stats.pool_unseen_confidence([[3, 27], [2, 8]])


class TestCalibration:
    def test_separated_groups(self):
        rng = np.random.default_rng(0)
        good = 0.95 + rng.normal(0, 1e-3, 50)
        bad = 0.55 + rng.normal(0, 1e-3, 50)
        res = stats.calibration_compare(
            np.concatenate([good, bad]), [True] * 50 + [False] * 50
        )
        assert res.difference == pytest.approx(0.40, abs=1e-3)
        assert res.p < 1e-10
        assert res.applicable

    def test_swapping_groups_negates_difference(self):
        rng = np.random.default_rng(1)
        conf = rng.uniform(0.5, 1.0, 40)
        correct = rng.random(40) < 0.6
        a = stats.calibration_compare(conf, correct)
        b = stats.calibration_compare(conf, ~correct)
        assert b.difference == pytest.approx(-a.difference)
        assert b.p == pytest.approx(a.p)

    def test_identical_distributions(self):
        conf = np.tile([0.6, 0.8, 1.0], 20)
        correct = np.tile([True, False], 30)
        # both groups hold each value equally often
        res = stats.calibration_compare(conf, correct)
        assert res.difference == pytest.approx(0.0, abs=1e-12)
        assert res.p == pytest.approx(1.0)

    def test_empty_group_is_not_applicable(self):
        res = stats.calibration_compare([0.9, 0.8], [True, True])
        assert not res.applicable
        d = res.to_dict()
        assert d["p"] is None
        assert d["n_incorrect"] == 0

    def test_single_member_group_is_not_applicable(self):
        res = stats.calibration_compare([0.9, 0.8, 0.7, 0.6], [True, True, True, False])
        assert not res.applicable
        assert res.n_incorrect == 1
        assert res.difference == pytest.approx(0.2)
        d = res.to_dict()
        assert d["p"] is None
        assert d["applicable"] is False
