"""
End-to-end behaviour of the correction on synthetic workloads, plus the sweep,
curve, robustness and acceptance drivers.
"""

import pytest

from enumerations import (
    CorrectionMode,
)
from main.jensen_kv.errors import (
    AcceptanceError,
)
from main.jensen_kv.experiments import (
    CheckResult,
    compare_modes,
    config_with,
    correction_overhead,
    curve_frame,
    derived_seeds,
    multi_seed_robustness,
    parse_alphas,
    require_passed,
    run_acceptance_suite,
    sweep,
)
from main.jensen_kv.schemas import (
    QuantSpec,
    WorkloadConfig,
)

UNCORRECTED_AND_TAYLOR = (CorrectionMode.NONE, CorrectionMode.TAYLOR)

DEFAULT_ROTATED = WorkloadConfig(spec=QuantSpec(bits=2, rotation=True))

SMALL_CONFIG = WorkloadConfig(
    n_queries=8,
    n_cached=64,
    n_current=32,
    head_dim=128,
    value_dim=128,
    heads=1,
    seed=5,
)


@pytest.fixture(scope='module')
def int2_comparison():
    return compare_modes(DEFAULT_ROTATED, UNCORRECTED_AND_TAYLOR)


class TestAttentionStealing:
    """Cached mass shift of quantized runs against the reference."""

    def test_uncorrected_steals_mass(self, int2_comparison):
        """Uncorrected INT2 moves more than 2% of mass onto the cache."""
        assert int2_comparison.median_delta_p_s(CorrectionMode.NONE) > 0.02

    def test_taylor_halves_shift(self, int2_comparison):
        """Taylor correction at least halves the median shift."""
        uncorrected = int2_comparison.median_delta_p_s(CorrectionMode.NONE)
        corrected = int2_comparison.median_delta_p_s(CorrectionMode.TAYLOR)

        assert abs(corrected) < 0.5 * uncorrected

    def test_jsd_and_mse_improve(self, int2_comparison):
        """JSD and output MSE drop with the correction."""
        uncorrected = int2_comparison.runs[CorrectionMode.NONE].report
        corrected = int2_comparison.runs[CorrectionMode.TAYLOR].report

        assert corrected.jsd_mean < uncorrected.jsd_mean
        assert corrected.output_mse < uncorrected.output_mse

    def test_correction_cost_ratio(self, int2_comparison):
        """Correction costs at most about 1/g of the score matmul."""
        run = int2_comparison.runs[CorrectionMode.TAYLOR]
        ratio = run.result.cost.correction_ratio

        assert 0.0 < ratio <= 1.0 / 32 + 0.02

    def test_more_bits_less_stealing(self, int2_comparison):
        """INT4 steals less than INT2."""
        int4 = compare_modes(
            config_with(DEFAULT_ROTATED, bits=4),
            (CorrectionMode.NONE,),
        )

        assert int4.median_delta_p_s(CorrectionMode.NONE) < (
            int2_comparison.median_delta_p_s(CorrectionMode.NONE)
        )

    def test_report_payload(self, int2_comparison):
        """Report payload is keyed by mode."""
        payload = int2_comparison.to_dict()

        assert set(payload['modes']) == {'none', 'taylor'}
        assert payload['modes']['taylor']['config']['mode'] == 'taylor'


class TestCorrectionOverhead:
    """Wall-clock cost of the Taylor correction."""

    def test_overhead_small(self):
        """Taylor correction adds under 15% wall-clock time."""
        timing = correction_overhead(DEFAULT_ROTATED)

        assert timing['overhead'] < 0.15


class TestConfigWith:
    """Spec overrides are re-validated."""

    def test_updates_spec(self):
        """Overrides replace spec fields and keep the rest."""
        config = config_with(SMALL_CONFIG, bits=4, group_size=64)

        assert config.spec.bits == 4
        assert config.spec.group_size == 64
        assert config.n_cached == SMALL_CONFIG.n_cached

    def test_rejects_invalid(self):
        """Overrides are validated against head_dim."""
        with pytest.raises(ValueError):
            config_with(SMALL_CONFIG, group_size=48)


class TestSweep:
    """Bits x group size x mode table."""

    @pytest.fixture(scope='class')
    def frame(self):
        return sweep(SMALL_CONFIG)

    def test_rows(self, frame):
        """Three bit widths, two group sizes, two modes."""
        assert frame.height == 3 * 2 * 2
        assert set(frame['mode'].to_list()) == {'none', 'taylor'}

    def test_effective_bits(self, frame):
        """INT2 with g = 32 stores 2.75 bits per element."""
        row = frame.filter(
            (frame['bits'] == 2)
            & (frame['group_size'] == 32)
            & (frame['mode'] == 'none'),
        )

        assert row['effective_bits'].item() == 2.75

    def test_uncorrected_has_no_correction_cost(self, frame):
        """Uncorrected rows report no correction cost."""
        uncorrected = frame.filter(frame['mode'] == 'none')

        assert uncorrected['correction_ratio'].to_list() == [0.0] * 6

    def test_score_statistics(self, frame):
        """Reference score statistics do not depend on the quantizer."""
        assert frame['score_std'].n_unique() == 1
        assert (frame['score_p5'] < frame['score_p95']).all()


class TestCurve:
    """Exact-vs-Taylor CSV rows."""

    def test_parse_default_range(self):
        """0:5:0.1 gives 51 alphas including both ends."""
        alphas = parse_alphas('0:5:0.1')

        assert len(alphas) == 51
        assert alphas[0] == 0.0
        assert alphas[-1] == 5.0

    @pytest.mark.parametrize('text', ['0:5', '5:0:0.1', '0:5:0', 'a:b:c'])
    def test_parse_invalid(self, text):
        """Malformed or empty ranges are rejected."""
        with pytest.raises(ValueError):
            parse_alphas(text)

    def test_frame(self):
        """Columns and values of the exact-vs-Taylor table."""
        frame = curve_frame(parse_alphas('0:2:0.5'))

        assert frame.columns == ['alpha', 'exact', 'taylor']
        assert frame.row(0) == (0.0, 0.0, 0.0)
        assert frame['taylor'][2] == pytest.approx(1.0 / 6.0)
        assert (frame['taylor'] >= frame['exact']).all()


class TestRobustness:
    """Derived seeds and multi-seed summaries."""

    def test_derived_seeds(self):
        """Derived seeds are distinct, stable and 32-bit."""
        seeds = derived_seeds(0, 5)

        assert seeds == derived_seeds(0, 5)
        assert len(set(seeds)) == 5
        assert all(0 <= seed < 2**32 for seed in seeds)

    def test_fractions(self):
        """Fractions of seeds satisfying each ordering lie in [0, 1]."""
        result = multi_seed_robustness(SMALL_CONFIG, 2)

        assert result['n_seeds'] == 2
        assert len(result['per_seed']) == 2
        for fraction in result['fractions'].values():
            assert 0.0 <= fraction <= 1.0

    def test_needs_seeds(self):
        """At least one seed is required."""
        with pytest.raises(ValueError):
            multi_seed_robustness(SMALL_CONFIG, 0)


class TestAcceptanceSuite:
    """Monte Carlo acceptance checks."""

    def test_suite_passes(self):
        """Every acceptance check passes."""
        checks = run_acceptance_suite(
            seed=0,
            n_samples=50_000,
            n_partition_samples=100_000,
            max_z_score=4.0,
        )

        assert [check.name for check in checks] == [
            'closed_form_agreement',
            'partition_unbiasedness',
            'cgf_identity',
            'taylor_dominance',
            'rotated_correction_consistency',
        ]
        assert all(check.passed for check in checks)
        require_passed(checks)

    def test_failed_check_raises(self):
        """A failed check raises with its name."""
        checks = [
            CheckResult(name='ok', passed=True),
            CheckResult(name='broken', passed=False),
        ]

        with pytest.raises(AcceptanceError) as error:
            require_passed(checks)

        assert error.value.failed_checks == ['broken']

    def test_to_dict(self):
        """Check results serialize to plain dicts."""
        result = CheckResult(name='x', passed=True, detail={'a': 1.0})

        assert result.to_dict() == {'name': 'x', 'passed': True, 'detail': {'a': 1.0}}


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
