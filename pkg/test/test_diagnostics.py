"""
Tests for attention mass, JSD, output MSE, summaries and reports.
"""

import numpy as np
import pytest
from scipy.spatial.distance import (
    jensenshannon,
)

from constants.report import (
    ReportConstants,
)
from main.jensen_kv.diagnostics import (
    attention_mass,
    attention_mass_decomposition,
    attention_mass_shift,
    attention_output_mse,
    build_report,
    jensen_shannon_divergence,
    nearest_rank_percentile,
    summarize,
)
from main.jensen_kv.errors import (
    JensenKvError,
    ShapeMismatchError,
)


def _random_weights(seed: int, rows: int = 10, n: int = 12) -> np.ndarray:
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.0, 1.0, size=(rows, n))

    return weights / weights.sum(axis=-1, keepdims=True)


class TestAttentionMass:
    """Cached/current split of a weight row."""

    def test_uniform(self):
        """Uniform weights split evenly at the midpoint."""
        cached, current = attention_mass(np.full(8, 0.125), 4)

        assert cached == pytest.approx(0.5)
        assert current == pytest.approx(0.5)

    def test_empty_cache(self):
        """An empty cache carries no mass."""
        cached, current = attention_mass(np.full(4, 0.25), 0)

        assert cached == 0.0
        assert current == 1.0

    def test_split_after_two(self):
        """Mass of the first two tokens."""
        cached, _ = attention_mass(np.array([0.7, 0.1, 0.2]), 2)

        assert cached == pytest.approx(0.8)

    def test_rows(self):
        """Row-wise masses of a weight matrix sum to one."""
        weights = _random_weights(0)

        cached, current = attention_mass(weights, 5)

        np.testing.assert_allclose(cached, weights[:, :5].sum(axis=-1))
        np.testing.assert_allclose(cached + current, 1.0)

    def test_split_out_of_range(self):
        """A split beyond the row is rejected."""
        with pytest.raises(ShapeMismatchError):
            attention_mass(np.full(4, 0.25), 5)

    def test_not_normalized(self):
        """Rows that do not sum to one are rejected."""
        with pytest.raises(JensenKvError):
            attention_mass(np.array([0.5, 0.6]), 1)

    def test_decomposition(self):
        """Partition sums reproduce the softmax mass."""
        scores = np.array([1.0, 2.0, 0.5, -1.0])
        weights = np.exp(scores) / np.exp(scores).sum()

        parts = attention_mass_decomposition(scores, 2)

        assert parts['P_S'] == pytest.approx(weights[:2].sum())
        assert parts['Z'] == pytest.approx(parts['Z_S'] + parts['Z_R'])
        assert parts['log_offset'] == 2.0


class TestAttentionMassShift:
    """Per-row change of the cached mass."""

    def test_shift(self):
        """Moving 0.1 onto the cached tokens gives a shift of 0.1."""
        ref = np.array([0.25, 0.25, 0.25, 0.25])
        test = np.array([0.3, 0.3, 0.2, 0.2])

        assert attention_mass_shift(ref, test, 2) == pytest.approx(0.1)

    def test_antisymmetric(self):
        """Swapping reference and test negates the shift."""
        ref = _random_weights(1)
        test = _random_weights(2)

        np.testing.assert_allclose(
            attention_mass_shift(ref, test, 6),
            -attention_mass_shift(test, ref, 6),
        )

    def test_shape_mismatch(self):
        """Rows of different length are rejected."""
        with pytest.raises(ShapeMismatchError):
            attention_mass_shift(np.full(4, 0.25), np.full(2, 0.5), 1)


class TestJensenShannon:
    """Base-2 Jensen-Shannon divergence."""

    def test_identical(self):
        """A distribution has zero divergence from itself."""
        p = _random_weights(3)

        np.testing.assert_allclose(jensen_shannon_divergence(p, p), 0.0, atol=1e-15)

    def test_disjoint(self):
        """Disjoint supports give the maximum of 1 bit."""
        assert jensen_shannon_divergence(
            np.array([1.0, 0.0]),
            np.array([0.0, 1.0]),
        ) == pytest.approx(1.0)

    def test_half_vs_point_mass(self):
        """[0.5, 0.5] against [1, 0] gives 0.3113."""
        assert jensen_shannon_divergence(
            np.array([0.5, 0.5]),
            np.array([1.0, 0.0]),
        ) == pytest.approx(0.3113, abs=1e-4)

    def test_symmetric(self):
        """The divergence is symmetric."""
        p = _random_weights(4)
        q = _random_weights(5)

        np.testing.assert_allclose(
            jensen_shannon_divergence(p, q),
            jensen_shannon_divergence(q, p),
        )

    def test_matches_scipy(self):
        """scipy returns the distance, the square root of the divergence."""
        p = _random_weights(6)
        q = _random_weights(7)

        expected = jensenshannon(p, q, base=2, axis=-1) ** 2

        np.testing.assert_allclose(jensen_shannon_divergence(p, q), expected, rtol=1e-9)

    def test_negative_entries(self):
        """Negative weights are rejected."""
        with pytest.raises(JensenKvError):
            jensen_shannon_divergence(np.array([1.5, -0.5]), np.array([0.5, 0.5]))


class TestOutputMse:
    """Mean squared attention-output error."""

    def test_identical(self):
        """Identical outputs have zero error."""
        x = np.random.default_rng(8).standard_normal((2, 3, 4))

        assert attention_output_mse(x, x) == 0.0

    def test_constant_difference(self):
        """A constant offset of 2 gives an error of 4."""
        x = np.zeros((3, 5))

        assert attention_output_mse(x, x + 2.0) == 4.0

    def test_brute_force(self):
        """Matches an element-by-element sum."""
        rng = np.random.default_rng(9)
        ref = rng.standard_normal((4, 6))
        test = rng.standard_normal((4, 6))

        total = 0.0
        for i in range(4):
            for j in range(6):
                total += (test[i, j] - ref[i, j]) ** 2

        assert attention_output_mse(ref, test) == pytest.approx(total / 24, abs=1e-12)

    def test_shape_mismatch(self):
        """Outputs of different shape are rejected."""
        with pytest.raises(ShapeMismatchError):
            attention_output_mse(np.zeros(3), np.zeros(4))


class TestSummarize:
    """Nearest-rank percentiles and fixed-width histograms."""

    def test_median(self):
        """Median of three values."""
        assert summarize([1.0, 2.0, 3.0]).median == 2.0

    def test_constant(self):
        """Constant input collapses every percentile."""
        summary = summarize([0.7] * 10)

        assert summary.p5 == summary.p95 == 0.7
        assert sum(summary.histogram_counts) == 10

    def test_nearest_rank(self):
        """Nearest-rank p5 and p95 of 0..99."""
        summary = summarize(np.arange(100.0))

        assert summary.p95 == 95.0
        assert summary.p5 == 5.0

    def test_percentile_clamps_to_last(self):
        """p100 is the largest value."""
        assert nearest_rank_percentile(np.array([1.0, 2.0]), 100) == 2.0

    def test_histogram_bins(self):
        """Fixed range and bin count give fixed edges."""
        summary = summarize(
            np.linspace(-1.0, 1.0, 50),
            bins=10,
            value_range=(-1.0, 1.0),
        )

        assert len(summary.histogram_edges) == 11
        assert summary.histogram_edges[0] == -1.0
        assert sum(summary.histogram_counts) == 50

    def test_empty(self):
        """Summaries need at least one value."""
        with pytest.raises(JensenKvError):
            summarize([])


class TestReport:
    """Report assembly and size-gated per-query arrays."""

    def _report(self):
        ref = _random_weights(10, rows=8)
        test = _random_weights(11, rows=8)
        rng = np.random.default_rng(12)
        ref_output = rng.standard_normal((8, 4))

        return build_report(
            ref,
            test,
            ref_output,
            ref_output + 0.5,
            split_index=6,
            config={'seed': 0},
            cost={'score_ops': 10},
        )

    def test_fields(self):
        """Per-query arrays, JSD range and output MSE."""
        report = self._report()

        assert report.delta_p_s.shape == (8,)
        np.testing.assert_allclose(report.delta_p_s, report.p_s_hat - report.p_s_ref)
        assert np.all((report.jsd >= 0.0) & (report.jsd <= 1.0))
        assert report.output_mse == pytest.approx(0.25)

    def test_to_dict(self):
        """JSON payload carries config, cost and summaries."""
        payload = self._report().to_dict()

        assert payload['schema_version'] == ReportConstants.SchemaVersion
        assert payload['config'] == {'seed': 0}
        assert payload['cost'] == {'score_ops': 10}
        assert len(payload['per_query']['delta_P_S']) == 8
        assert set(payload['summaries']['delta_p_s']) == {
            'mean',
            'median',
            'p5',
            'p95',
            'histogram',
        }

    def test_per_query_gated(self):
        """Per-query arrays are dropped above the row limit."""
        payload = self._report().to_dict(per_query_limit=4)

        assert 'per_query' not in payload
        assert 'jsd' in payload


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
