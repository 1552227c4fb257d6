"""
Tests for the exact, Taylor, grouped and per-channel score corrections.
"""

import math

import numpy as np
import pytest

from enumerations import (
    CorrectionForm,
)
from main.jensen_kv.bias_correction import (
    exact_correction,
    exact_vs_taylor_curve,
    expected_inflation_factor,
    grouped_taylor_correction,
    log_sinhc,
    per_channel_correction,
    scaled_alphas,
    score_noise_variance,
    taylor_correction,
)
from main.jensen_kv.errors import (
    QuantizationError,
    ShapeMismatchError,
)
from main.jensen_kv.rotation import (
    group_squared_norms,
)


def _random_inputs(seed: int, n: int = 200, d: int = 64):
    rng = np.random.default_rng(seed)

    return (
        rng.standard_normal((n, d)) * 2.0,
        rng.uniform(0.0, 3.0, size=(n, d)),
    )


class TestLogSinhc:
    """Numerically stable log(sinh(a) / a)."""

    def test_zero(self):
        """Zero argument gives zero."""
        assert log_sinhc(0.0) == 0.0

    def test_one(self):
        """Matches log(sinh(1)) directly."""
        assert log_sinhc(1.0) == pytest.approx(math.log(math.sinh(1.0)), rel=1e-12)

    def test_large_argument_is_finite(self):
        """No overflow where sinh itself would overflow."""
        assert log_sinhc(1000.0) == pytest.approx(1000.0 - math.log(2000.0))

    def test_largest_float_is_finite(self):
        """No overflow at the top of the float range."""
        assert math.isfinite(log_sinhc(np.finfo(np.float64).max))

    def test_branch_continuity(self):
        """Series and closed form agree around the switch point."""
        below = log_sinhc(1e-3 * (1.0 - 1e-9))
        above = log_sinhc(1e-3 * (1.0 + 1e-9))

        assert below == pytest.approx(above, rel=1e-6)

    def test_matches_direct_formula(self):
        """Agrees with log(sinh(a) / a) where sinh does not overflow."""
        alphas = np.linspace(0.05, 20.0, 500)

        np.testing.assert_allclose(
            log_sinhc(alphas),
            np.log(np.sinh(alphas) / alphas),
            rtol=1e-10,
        )


class TestExactCorrection:
    """b = sum_c log(sinh(alpha_c) / alpha_c)."""

    def test_zero_deltas(self):
        """No noise, no correction."""
        assert exact_correction(np.ones(8), np.zeros(8), 8) == 0.0

    def test_unit_alpha(self):
        """d = 1, q = 2, delta = 1 gives alpha = 1."""
        assert exact_correction(np.array([2.0]), np.array([1.0]), 1) == pytest.approx(
            0.161439,
            abs=1e-6,
        )

    def test_alphas(self):
        """d = 2, q = [2, 4], delta = [1, 0.5] gives alpha = 1 / sqrt(2) twice."""
        np.testing.assert_allclose(
            scaled_alphas(np.array([2.0, 4.0]), np.array([1.0, 0.5]), 2),
            [1.0 / math.sqrt(2.0)] * 2,
        )

    def test_huge_finite_inputs(self):
        """q * delta beyond the float range still gives a finite correction."""
        correction = exact_correction(np.array([1e300]), np.array([3e8]), 1)

        assert math.isfinite(correction)
        assert correction == pytest.approx(1.5e308, rel=1e-12)

    def test_even_in_query(self):
        """Flipping the query sign leaves the correction unchanged."""
        q, deltas = _random_inputs(0)

        np.testing.assert_array_equal(
            exact_correction(q, deltas, 64),
            exact_correction(-q, deltas, 64),
        )

    def test_channel_permutation(self):
        """Permuting channels of q and delta together leaves it unchanged."""
        q, deltas = _random_inputs(1, n=1)
        permutation = np.random.default_rng(2).permutation(64)

        assert exact_correction(q, deltas, 64)[0] == pytest.approx(
            exact_correction(q[:, permutation], deltas[:, permutation], 64)[0],
        )

    def test_non_negative(self):
        """The correction is never negative."""
        q, deltas = _random_inputs(3)

        assert np.all(exact_correction(q, deltas, 64) >= 0.0)

    def test_expected_inflation_factor(self):
        """d = 1, q = 2, delta = 1 gives E[exp(delta)] = sinh(1)."""
        assert expected_inflation_factor(
            np.array([2.0]),
            np.array([1.0]),
            1,
        ) == pytest.approx(math.sinh(1.0))

    def test_non_finite(self):
        """Infinite queries are rejected."""
        with pytest.raises(QuantizationError):
            exact_correction(np.array([np.inf]), np.array([1.0]), 1)

    def test_negative_delta(self):
        """Negative step sizes are rejected."""
        with pytest.raises(QuantizationError):
            exact_correction(np.array([1.0]), np.array([-1.0]), 1)

    def test_length_mismatch(self):
        """q and delta must both have length d."""
        with pytest.raises(ShapeMismatchError):
            exact_correction(np.ones(4), np.ones(8), 8)


class TestTaylorCorrection:
    """Second-order form and its relation to the noise variance."""

    def test_zero_deltas(self):
        """No noise, no correction."""
        assert taylor_correction(np.ones(8), np.zeros(8), 8) == 0.0

    def test_direct_formula(self):
        """d = 1, q = 2, delta = 1 gives 4 / 24."""
        assert taylor_correction(np.array([2.0]), np.array([1.0]), 1) == pytest.approx(
            4.0 / 24.0,
        )

    def test_noise_variance(self):
        """d = 1, q = 2, delta = 1 gives a score noise variance of 1/3."""
        assert score_noise_variance(
            np.array([2.0]),
            np.array([1.0]),
            1,
        ) == pytest.approx(1.0 / 3.0)

    def test_zero_variance(self):
        """Zero step sizes give zero variance."""
        assert score_noise_variance(np.ones(4), np.zeros(4), 4) == 0.0

    def test_cgf_identity(self):
        """Taylor correction is half the score noise variance."""
        q, deltas = _random_inputs(4, n=1000)

        taylor = taylor_correction(q, deltas, 64)
        half_variance = score_noise_variance(q, deltas, 64) / 2.0

        np.testing.assert_allclose(taylor, half_variance, rtol=1e-12)

    def test_dominates_exact(self):
        """The Taylor form is never below the exact form."""
        q, deltas = _random_inputs(5)

        taylor = taylor_correction(q, deltas, 64)

        assert np.all(taylor >= exact_correction(q, deltas, 64))

    @pytest.mark.parametrize('scale', [1.0, 1.5, 3.0])
    def test_monotone_in_noise(self, scale):
        """Scaling every step size up never lowers either correction."""
        q, deltas = _random_inputs(6)

        for correction in (exact_correction, taylor_correction):
            assert np.all(
                correction(q, deltas * scale, 64) >= correction(q, deltas, 64),
            )


class TestGroupedCorrection:
    """Grouped Taylor form from per-group query norms."""

    def test_matches_expanded_taylor(self):
        """Group norms times group step sizes equal the channel-wise Taylor form."""
        rng = np.random.default_rng(7)
        q = rng.standard_normal((10, 128))
        group_deltas = rng.uniform(0.1, 2.0, size=(10, 4))

        np.testing.assert_allclose(
            grouped_taylor_correction(group_squared_norms(q, 32), group_deltas, 128),
            taylor_correction(q, np.repeat(group_deltas, 32, axis=-1), 128),
            rtol=1e-12,
        )

    def test_single_group(self):
        """g = d, delta = 1, ||q||^2 = 24 d gives 1."""
        d = 16

        assert grouped_taylor_correction(
            np.array([24.0 * d]),
            np.array([1.0]),
            d,
        ) == pytest.approx(1.0)

    def test_zero_deltas(self):
        """No noise, no correction."""
        assert grouped_taylor_correction(np.ones(4), np.zeros(4), 128) == 0.0

    def test_group_count_mismatch(self):
        """One step size per group is required."""
        with pytest.raises(ShapeMismatchError):
            grouped_taylor_correction(np.ones(4), np.ones(2), 128)


class TestPerChannelCorrection:
    """One scalar per query for token-independent step sizes."""

    def test_same_as_token_forms(self):
        """Shared step sizes reduce to the per-token forms."""
        q, deltas = _random_inputs(8, n=5)

        np.testing.assert_array_equal(
            per_channel_correction(q, deltas, 64, CorrectionForm.TAYLOR),
            taylor_correction(q, deltas, 64),
        )
        np.testing.assert_array_equal(
            per_channel_correction(q, deltas, 64, CorrectionForm.EXACT),
            exact_correction(q, deltas, 64),
        )

    def test_zero_deltas(self):
        """No noise, no correction."""
        assert per_channel_correction(np.ones(8), np.zeros(8), 8) == 0.0

    def test_doubling_quadruples_taylor(self):
        """Doubling every step size quadruples the Taylor correction."""
        q, deltas = _random_inputs(9, n=5)

        np.testing.assert_allclose(
            per_channel_correction(q, 2.0 * deltas, 64),
            4.0 * per_channel_correction(q, deltas, 64),
        )


class TestExactVsTaylorCurve:
    """Exact and Taylor corrections as functions of alpha."""

    def test_origin(self):
        """Both forms vanish at alpha = 0."""
        assert exact_vs_taylor_curve([0.0]) == [(0.0, 0.0)]

    def test_unit_alpha(self):
        """alpha = 1: exact 0.161439, Taylor 1/6."""
        [(exact, taylor)] = exact_vs_taylor_curve([1.0])

        assert exact == pytest.approx(0.161439, abs=1e-6)
        assert taylor == pytest.approx(0.166667, abs=1e-6)
        assert taylor > exact

    def test_large_alpha(self):
        """alpha = 5: exact 2.697, Taylor 25/6."""
        [(exact, taylor)] = exact_vs_taylor_curve([5.0])

        assert exact == pytest.approx(2.697, abs=1e-3)
        assert taylor == pytest.approx(25.0 / 6.0)

    def test_dominance_and_small_alpha_accuracy(self):
        """Taylor dominates on [0, 50] and is within 1% below alpha 0.25."""
        alphas = np.linspace(0.0, 50.0, 5001)
        pairs = np.asarray(exact_vs_taylor_curve(alphas))
        exact, taylor = pairs[:, 0], pairs[:, 1]

        assert np.all(taylor >= exact)

        small = (alphas > 0.0) & (alphas <= 0.25)
        assert np.all(np.abs(taylor[small] - exact[small]) / exact[small] < 0.01)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
