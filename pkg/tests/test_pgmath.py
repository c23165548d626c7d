import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgtensor.pgmath import (expected_kappa, expected_label, logistic_weight, observed_kappa, pg_mean,
                             sigmoid)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)

# 40-digit mpmath evaluations
SIGMOID_1 = 0.7310585786300048792511592418218362743651
TANH1_OVER_4 = 0.1903985389889412220298645706511983976032
SIG2_SIGM2 = 0.1049935854035065173486241847604253612293
HALF_SIG2 = 0.4403985389889412220298645706511983976032


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_saturates_without_overflow(self):
        with np.errstate(all="raise"):
            assert sigmoid(800.0) == 1.0
            assert sigmoid(-800.0) == 0.0

    def test_oracle(self):
        assert sigmoid(1.0) == pytest.approx(SIGMOID_1, abs=1e-15)

    @given(finite)
    def test_complement(self, x):
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            sigmoid(np.nan)
        with pytest.raises(ValueError):
            pg_mean(np.array([0.0, np.inf]))


class TestPgMean:
    def test_limit_at_zero(self):
        assert pg_mean(0.0) == 0.25

    def test_oracle(self):
        assert pg_mean(2.0) == pytest.approx(TANH1_OVER_4, abs=1e-15)

    def test_even(self):
        assert pg_mean(-2.0) == pg_mean(2.0)

    def test_series_continuity(self):
        # both sides of the series cutoff
        x = np.array([9.99e-7, 1.001e-6])
        np.testing.assert_allclose(pg_mean(x), 0.25 - x * x / 48, rtol=1e-15)

    @given(finite)
    def test_range(self, x):
        v = pg_mean(x)
        assert 0.0 < v <= 0.25

    def test_half_angle_identity(self):
        phi = np.linspace(-30, 30, 10_000)
        np.testing.assert_allclose(pg_mean(phi), (sigmoid(phi) - 0.5) / phi, rtol=0, atol=1e-12)


class TestLogisticWeight:
    def test_zero(self):
        assert logistic_weight(0.0) == 0.25

    def test_oracle(self):
        assert logistic_weight(2.0) == pytest.approx(SIG2_SIGM2, abs=1e-15)

    def test_saturation(self):
        with np.errstate(all="raise"):
            assert logistic_weight(1000.0) == pytest.approx(0.0, abs=1e-300)
            assert np.isfinite(logistic_weight(-1500.0))

    def test_matches_cosh_form(self):
        phi = np.linspace(-40, 40, 801)
        cosh_form = 1.0 / (np.exp(-phi / 2) + np.exp(phi / 2)) ** 2
        np.testing.assert_allclose(logistic_weight(phi), cosh_form, rtol=1e-12)

    @given(finite)
    def test_even(self, x):
        assert logistic_weight(x) == pytest.approx(logistic_weight(-x), rel=1e-12, abs=1e-300)


class TestKappa:
    def test_expected_values(self):
        assert expected_kappa(0.0, 1) == 0.25
        assert expected_kappa(0.0, 0) == -0.25
        assert expected_kappa(2.0, 1) == pytest.approx(HALF_SIG2, abs=1e-15)

    def test_observed(self):
        np.testing.assert_array_equal(observed_kappa(np.array([0, 1])), [-0.5, 0.5])

    def test_expected_label(self):
        assert expected_label(0.0, 1) == 0.5
        assert expected_label(0.0, -1) == -0.5
        assert expected_label(3.0, 1) == pytest.approx(sigmoid(3.0))

    @given(finite)
    def test_expected_kappa_bounds(self, x):
        assert 0 <= expected_kappa(x, 1) <= 0.5
        assert -0.5 <= expected_kappa(x, 0) <= 0
