import numpy as np
import pytest

from crmtrain.conformal import (ConformalConfig, PredictionSet, ScoreKind,
                                empirical_quantile, metrics_from_mask, score,
                                scores_all, set_metrics, smooth_set, thr_set)


class TestScore:
    def test_symmetric_softmax_probability(self):
        assert score(np.zeros(2), 0, ScoreKind.PROBABILITY) == pytest.approx(0.5)

    def test_logit_is_raw_entry(self):
        assert score(np.array([3.0, -1.0]), 0, ScoreKind.LOGIT) == 3.0

    def test_uniform_log_probability(self):
        got = score(np.zeros(3), 2, ScoreKind.LOG_PROBABILITY)
        assert got == pytest.approx(np.log(1.0 / 3.0))

    def test_log_probability_is_overflow_safe(self):
        got = score(np.array([1e4, 0.0]), 0, ScoreKind.LOG_PROBABILITY)
        assert np.isfinite(got) and got == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            score(np.zeros(3), 3, ScoreKind.LOGIT)


class TestEmpiricalQuantile:
    def test_second_order_statistic(self):
        tau, idx = empirical_quantile(np.array([0.1, 0.2, 0.3, 0.4, 0.5]), 0.4)
        assert tau == 0.2 and idx == 1

    def test_small_alpha_takes_minimum(self):
        tau, idx = empirical_quantile(np.arange(1.0, 11.0), 0.01)
        assert tau == 1.0 and idx == 0

    def test_alpha_near_one_takes_maximum(self):
        tau, _ = empirical_quantile(np.array([3.0, 1.0, 5.0, 2.0, 4.0]), 0.999)
        assert tau == 5.0

    def test_float_product_does_not_overshoot_rank(self):
        # 0.07 * 100 rounds up to 7.000...1 in binary; rank must stay 7
        tau, _ = empirical_quantile(np.arange(1.0, 101.0), 0.07)
        assert tau == 7.0

    def test_ties_break_to_lowest_original_index(self):
        tau, idx = empirical_quantile(np.array([0.2, 0.1, 0.2, 0.2]), 0.6)
        assert tau == 0.2 and idx == 0

    def test_value_is_permutation_invariant(self):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal(31)
        for alpha in (0.05, 0.3, 0.77):
            base, _ = empirical_quantile(scores, alpha)
            for _ in range(10):
                shuffled = rng.permutation(scores)
                tau, _ = empirical_quantile(shuffled, alpha)
                assert tau == base

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError, match="nonempty"):
            empirical_quantile(np.array([]), 0.5)
        with pytest.raises(ValueError, match="non-finite"):
            empirical_quantile(np.array([1.0, np.nan]), 0.5)


class TestThrSet:
    def test_minus_inf_surrogate_keeps_all_labels(self):
        s = thr_set(np.array([3.0, -1.0, 2.0]), -np.finfo(np.float64).max,
                    ScoreKind.LOGIT)
        assert s.size == 3

    def test_threshold_above_max_empties_set(self):
        s = thr_set(np.array([3.0, -1.0, 2.0]), 4.0, ScoreKind.LOGIT)
        assert s.size == 0

    def test_inclusive_threshold(self):
        s = thr_set(np.array([3.0, -1.0, 2.0]), 2.0, ScoreKind.LOGIT)
        assert s.members.tolist() == [True, False, True]


class TestSmoothSet:
    def config(self, temp):
        return ConformalConfig(alpha=0.1, temperature=temp,
                               score_kind=ScoreKind.LOGIT)

    def test_score_at_threshold_gives_half(self):
        s = smooth_set(np.array([2.0]), 2.0, self.config(1.0))
        assert s.memberships[0] == pytest.approx(0.5)

    def test_one_temperature_above_threshold(self):
        s = smooth_set(np.array([3.0]), 2.0, self.config(1.0))
        assert s.memberships[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)))

    def test_small_temperature_approaches_hard_set(self):
        s = smooth_set(np.array([3.0]), 2.0, self.config(0.1))
        assert s.memberships[0] > 0.999

    def test_rounding_reproduces_hard_set_at_tiny_temperature(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal(10)
        scores = scores_all(logits, ScoreKind.LOG_PROBABILITY)
        tau = float(np.median(scores)) + 1e-3
        spread = float(scores.max() - scores.min())
        cfg = ConformalConfig(alpha=0.1, temperature=1e-6 * spread,
                              score_kind=ScoreKind.LOG_PROBABILITY)
        soft = smooth_set(logits, tau, cfg)
        hard = thr_set(logits, tau, ScoreKind.LOG_PROBABILITY)
        assert np.array_equal(soft.memberships >= 0.5, hard.members)


class TestSetMetrics:
    def test_full_sets_cover_everything(self):
        sets = [PredictionSet(np.ones(4, dtype=bool)) for _ in range(3)]
        m = set_metrics(sets, [0, 1, 3])
        assert m.coverage == 1.0 and m.avg_size == 4.0

    def test_empty_sets_cover_nothing(self):
        sets = [PredictionSet(np.zeros(4, dtype=bool)) for _ in range(3)]
        m = set_metrics(sets, [0, 1, 3])
        assert m.coverage == 0.0 and m.avg_size == 0.0

    def test_mixed_sets(self):
        sets = [PredictionSet([True, False]), PredictionSet([True, True])]
        m = set_metrics(sets, [0, 0])
        assert m.coverage == 1.0 and m.avg_size == 1.5

    def test_per_class_breakdown(self):
        members = np.array([[True, False], [True, True], [False, True]])
        m = metrics_from_mask(members, np.array([0, 0, 1]))
        assert m.per_class_coverage.tolist() == [1.0, 1.0]
        assert m.per_class_size.tolist() == [1.5, 1.0]

    def test_rejects_empty_input(self):
        with pytest.raises(ValueError):
            set_metrics([], [])


class TestExchangeabilityCoverage:
    def test_coverage_concentrates_near_target(self):
        # i.i.d. continuous scores; thresholding at the calibrated quantile
        # must cover close to 1 - alpha. Light version of the acceptance
        # check: 6 seeds, both alphas, 99% binomial CI.
        for alpha in (0.01, 0.1):
            half_width = 2.5758 * np.sqrt(alpha * (1 - alpha) / 10_000)
            hits = 0
            for seed in range(6):
                rng = np.random.default_rng(seed)
                cal = rng.random(50_000)
                test = rng.random(10_000)
                tau, _ = empirical_quantile(cal, alpha)
                coverage = float((test >= tau).mean())
                hits += abs(coverage - (1 - alpha)) <= half_width
            assert hits >= 5


class TestConfigValidation:
    def test_alpha_bounds(self):
        with pytest.raises(ValueError, match="alpha"):
            ConformalConfig(alpha=0.0)
        with pytest.raises(ValueError, match="alpha"):
            ConformalConfig(alpha=1.0)

    def test_temperature_positive(self):
        with pytest.raises(ValueError, match="temperature"):
            ConformalConfig(alpha=0.1, temperature=0.0)
