import numpy as np
import pytest

import calc
from core.errors import ConfigError


class TestSmoothing:
    def test_debiased_first_value(self):
        out = calc.exponential_smoothing([4.0, 2.0, 2.0], 0.9)
        assert out[0] == pytest.approx(4.0)

    def test_constant_series_stays_constant(self):
        np.testing.assert_allclose(calc.exponential_smoothing(np.full(50, 3.0), 0.99), 3.0)

    def test_raw_average_follows_geometric_series(self):
        out = calc.exponential_smoothing(np.ones(100), 0.99, debias=False)
        assert out[-1] == pytest.approx(1.0 - 0.99 ** 100)

    def test_rejects_bad_factor(self):
        with pytest.raises(ConfigError):
            calc.exponential_smoothing([1.0], 1.0)


class TestSuccessStatistics:
    def test_standard_error_closed_form(self):
        assert calc.standard_error(0.5, 256) == 0.03125

    def test_all_successes(self):
        p, se = calc.running_success_rate(np.ones(10))
        np.testing.assert_array_equal(p, 1.0)
        np.testing.assert_array_equal(se, 0.0)

    def test_running_curve(self):
        p, _ = calc.running_success_rate([1, 0, 1, 1])
        np.testing.assert_allclose(p, [1.0, 0.5, 2 / 3, 0.75])

    def test_band_coverage_per_replication(self):
        trials = np.array([[1, 1, 1, 1], [1, 0, 1, 0]], dtype=float)
        cov = calc.se_band_coverage(trials)
        assert cov.shape == (2,)
        assert cov[0] == 1.0

    def test_monte_carlo_coverage(self):
        cov = calc.simulate_se_coverage(0.7, 256, 400, np.random.default_rng(0))
        assert cov >= 0.95


class TestDiagnostics:
    def test_bimodal_sample_exceeds_threshold(self):
        rng = np.random.default_rng(1)
        x = np.concatenate([rng.normal(-1.0, 0.05, 5000), rng.normal(1.0, 0.05, 5000)])
        assert calc.bimodality_coefficient(x) > calc.BIMODAL_THRESHOLD

    def test_gaussian_sample_below_threshold(self):
        x = np.random.default_rng(2).normal(size=10_000)
        assert calc.bimodality_coefficient(x) < calc.BIMODAL_THRESHOLD

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            calc.bimodality_coefficient([1.0, 2.0, 3.0])

    def test_linear_fit_exact(self):
        slope, intercept, r2 = calc.linear_fit([8, 16, 24, 32], [1.5, 2.5, 3.5, 4.5])
        assert slope == pytest.approx(0.125)
        assert intercept == pytest.approx(0.5)
        assert r2 == pytest.approx(1.0)

    def test_loglog_interpolation(self):
        assert calc.loglog_interpolate(10.0, [1.0, 100.0], [1.0, 100.0]) == pytest.approx(10.0)
        assert np.isnan(calc.loglog_interpolate(1000.0, [1.0, 100.0], [1.0, 100.0]))
