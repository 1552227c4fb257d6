"""
Experiment drivers wiring the library together: reference-vs-quantized comparisons,
the storage/quality sweep, the exact-vs-Taylor curve, multi-seed robustness and the
Monte Carlo acceptance suite.
"""

import logging
import math
from dataclasses import (
    dataclass,
    field,
)
from typing import Any

import numpy as np
import polars
from chrono import (
    Timer,
)

from enumerations import (
    CorrectionMode,
)
from main.jensen_kv.attention_engine import (
    AttentionResult,
    attend,
    attention_scores,
    reference_attention,
)
from main.jensen_kv.bias_correction import (
    exact_vs_taylor_curve,
    score_noise_variance,
    taylor_correction,
)
from main.jensen_kv.diagnostics import (
    DiagnosticsReport,
    build_report,
    nearest_rank_percentile,
)
from main.jensen_kv.errors import (
    AcceptanceError,
)
from main.jensen_kv.noise_oracle import (
    closed_form_agreement_suite,
    mc_partition_bias,
    rotated_correction_consistency,
)
from main.jensen_kv.quant_core import (
    effective_bitwidth,
)
from main.jensen_kv.rotation import (
    build_rotation,
)
from main.jensen_kv.schemas import (
    QuantSpec,
    WorkloadConfig,
)
from main.jensen_kv.workload import (
    SyntheticWorkload,
    generate_workload,
)
from settings import settings

logger = logging.getLogger(__name__)

SWEEP_GROUP_SIZES = (128, 64, 32)
SWEEP_BITS = (2, 4)
SWEEP_MODES = (CorrectionMode.NONE, CorrectionMode.TAYLOR)


@dataclass(slots=True)
class ModeRun:
    mode: CorrectionMode
    result: AttentionResult
    report: DiagnosticsReport
    elapsed: float


@dataclass(slots=True)
class ComparisonRun:
    """Full-precision reference plus one quantized run per correction mode."""

    config: WorkloadConfig
    reference_output: np.ndarray
    reference_weights: np.ndarray
    runs: dict[CorrectionMode, ModeRun] = field(default_factory=dict)

    def median_delta_p_s(
        self,
        mode: CorrectionMode,
    ) -> float:
        return float(np.median(self.runs[mode].report.delta_p_s))

    def to_dict(self) -> dict[str, Any]:
        return {
            'config': self.config.model_dump(mode='json'),
            'modes': {
                str(mode): run.report.to_dict()
                for mode, run in self.runs.items()
            },
        }


def config_with(
    config: WorkloadConfig,
    **spec_updates: Any,
) -> WorkloadConfig:
    """Re-validated copy of `config` with some QuantSpec fields replaced."""
    spec = QuantSpec.model_validate(
        {
            **config.spec.model_dump(),
            **spec_updates,
        },
    )

    return WorkloadConfig.model_validate(
        {
            **config.model_dump(),
            'spec': spec,
        },
    )


def _reference(
    workload: SyntheticWorkload,
) -> tuple[np.ndarray, np.ndarray]:
    return reference_attention(
        workload.queries,
        workload.keys,
        workload.values,
        return_weights=True,
    )


def compare_modes(
    config: WorkloadConfig,
    modes: tuple[CorrectionMode, ...] = (
        CorrectionMode.NONE,
        CorrectionMode.TAYLOR,
        CorrectionMode.EXACT,
    ),
    workload: SyntheticWorkload | None = None,
) -> ComparisonRun:
    workload = workload or generate_workload(config)
    attention_workload, rotation = workload.to_attention_workload(
        spec=config.spec,
        quantize_values=config.quantize_values,
    )
    reference_output, reference_weights = _reference(workload)

    comparison = ComparisonRun(
        config=config,
        reference_output=reference_output,
        reference_weights=reference_weights,
    )

    for mode in modes:
        with Timer() as timer:
            result = attend(
                attention_workload,
                mode=mode,
                rotation=rotation,
                emit_weights=True,
            )

        report = build_report(
            reference_weights,
            result.weights,
            reference_output,
            result.output,
            split_index=workload.n_cached,
            config=config.model_copy(update={'mode': mode}).model_dump(mode='json'),
            cost=result.cost.to_dict(),
        )

        logger.info(
            'Mode %s: median dP_S=%.5f mean JSD=%.3e MSE=%.3e by %.3fs',
            mode,
            float(np.median(report.delta_p_s)),
            report.jsd_mean,
            report.output_mse,
            timer.elapsed,
        )

        comparison.runs[mode] = ModeRun(
            mode=mode,
            result=result,
            report=report,
            elapsed=timer.elapsed,
        )

    return comparison


def score_distribution(
    workload: SyntheticWorkload,
) -> dict[str, float]:
    scores = np.sort(attention_scores(workload.queries, workload.keys).reshape(-1))

    return {
        'score_mean': float(scores.mean()),
        'score_std': float(scores.std()),
        'score_p5': nearest_rank_percentile(scores, 5),
        'score_p95': nearest_rank_percentile(scores, 95),
    }


def sweep(
    config: WorkloadConfig,
    group_sizes: tuple[int, ...] = SWEEP_GROUP_SIZES,
    bits: tuple[int, ...] = SWEEP_BITS,
    modes: tuple[CorrectionMode, ...] = SWEEP_MODES,
) -> polars.DataFrame:
    """Storage/quality trade-off table: one row per (bits, group size, mode)."""
    workload = generate_workload(config)
    distribution = score_distribution(workload)
    rows = []

    for group_size in group_sizes:
        for bit_count in bits:
            point = config_with(config, bits=bit_count, group_size=group_size)
            comparison = compare_modes(point, modes, workload=workload)

            for mode, run in comparison.runs.items():
                rows.append(
                    {
                        'bits': bit_count,
                        'group_size': group_size,
                        'mode': str(mode),
                        'effective_bits': effective_bitwidth(bit_count, group_size),
                        'output_mse': run.report.output_mse,
                        'median_delta_p_s': comparison.median_delta_p_s(mode),
                        'mean_jsd': run.report.jsd_mean,
                        'correction_ratio': run.result.cost.correction_ratio,
                        **distribution,
                    },
                )

    return polars.DataFrame(rows)


def parse_alphas(
    text: str,
) -> list[float]:
    """'start:stop:step', stop inclusive."""
    try:
        start, stop, step = (float(part) for part in text.split(':'))
    except ValueError as exception:
        raise ValueError(
            f'Expected start:stop:step, got {text!r}',
        ) from exception

    if step <= 0.0 or stop < start:
        raise ValueError(f'Invalid alpha range {text!r}')

    count = math.floor((stop - start) / step + 1e-9) + 1

    return [round(start + index * step, 12) for index in range(count)]


def curve_frame(
    alphas: list[float],
) -> polars.DataFrame:
    pairs = exact_vs_taylor_curve(alphas)

    return polars.DataFrame(
        {
            'alpha': [float(alpha) for alpha in alphas],
            'exact': [exact for exact, _ in pairs],
            'taylor': [taylor for _, taylor in pairs],
        },
    )


def derived_seeds(
    seed: int,
    count: int,
) -> list[int]:
    state = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)

    return [int(value) for value in state]


def multi_seed_robustness(
    config: WorkloadConfig,
    n_seeds: int,
) -> dict[str, Any]:
    """
    Repeats the uncorrected-vs-Taylor comparison over derived seeds and reports
    how often each ordering holds.
    """
    if n_seeds < 1:
        raise ValueError('n_seeds must be >= 1')

    per_seed = []

    for seed in derived_seeds(config.seed, n_seeds):
        seeded = config.model_copy(update={'seed': seed})
        comparison = compare_modes(
            seeded,
            (CorrectionMode.NONE, CorrectionMode.TAYLOR),
        )
        uncorrected = comparison.runs[CorrectionMode.NONE].report
        corrected = comparison.runs[CorrectionMode.TAYLOR].report
        median_uncorrected = comparison.median_delta_p_s(CorrectionMode.NONE)
        median_corrected = comparison.median_delta_p_s(CorrectionMode.TAYLOR)

        per_seed.append(
            {
                'seed': seed,
                'median_delta_p_s_none': median_uncorrected,
                'median_delta_p_s_taylor': median_corrected,
                'mean_jsd_none': uncorrected.jsd_mean,
                'mean_jsd_taylor': corrected.jsd_mean,
                'output_mse_none': uncorrected.output_mse,
                'output_mse_taylor': corrected.output_mse,
                'stealing_halved': abs(median_corrected) < 0.5 * median_uncorrected,
                'jsd_improved': corrected.jsd_mean < uncorrected.jsd_mean,
                'mse_improved': corrected.output_mse < uncorrected.output_mse,
            },
        )

    def fraction(key: str) -> float:
        return sum(row[key] for row in per_seed) / len(per_seed)

    return {
        'config': config.model_dump(mode='json'),
        'n_seeds': n_seeds,
        'fractions': {
            'stealing_halved': fraction('stealing_halved'),
            'jsd_improved': fraction('jsd_improved'),
            'mse_improved': fraction('mse_improved'),
        },
        'per_seed': per_seed,
    }


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    passed: bool
    detail: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            'name': self.name,
            'passed': self.passed,
            'detail': self.detail,
        }


def _check_closed_form(
    n_samples: int,
    seed: int,
    max_z_score: float,
) -> CheckResult:
    rows = closed_form_agreement_suite(20, n_samples, seed)
    worst = max(abs(row['z_score']) for row in rows)

    return CheckResult(
        name='closed_form_agreement',
        passed=worst <= max_z_score,
        detail={
            'max_abs_z_score': worst,
            'bound': max_z_score,
            'configs': rows,
        },
    )


def partition_bias_config(
    seed: int,
) -> WorkloadConfig:
    """Small d = 64 INT2 workload used for the partition-sum unbiasedness check."""
    return WorkloadConfig(
        n_queries=4,
        n_cached=16,
        n_current=16,
        head_dim=64,
        value_dim=64,
        heads=1,
        seed=seed,
        spec=QuantSpec(bits=2, group_size=32, seed=seed),
    )


def _check_partition_bias(
    n_samples: int,
    seed: int,
) -> CheckResult:
    config = partition_bias_config(seed)
    bias = mc_partition_bias(
        generate_workload(config),
        config.spec,
        CorrectionMode.EXACT,
        n_samples,
        seed,
    )
    corrected = bias.corrected.mean

    return CheckResult(
        name='partition_unbiasedness',
        passed=0.995 <= corrected <= 1.005 and bias.uncorrected.mean > 1.0,
        detail=bias.to_dict(),
    )


def _check_cgf_identity(
    seed: int,
    n_cases: int = 1000,
) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = 64
    q = rng.standard_normal((n_cases, d)) * 2.0
    deltas = rng.uniform(0.0, 3.0, size=(n_cases, d))

    taylor = taylor_correction(q, deltas, d)
    half_variance = score_noise_variance(q, deltas, d) / 2.0
    relative = np.abs(taylor - half_variance) / np.maximum(half_variance, 1e-300)
    worst = float(relative.max())

    return CheckResult(
        name='cgf_identity',
        passed=worst <= 1e-12,
        detail={'max_relative_error': worst},
    )


def _check_taylor_dominance() -> CheckResult:
    alphas = np.linspace(0.0, 50.0, 5001)
    pairs = np.asarray(exact_vs_taylor_curve(alphas))
    exact, taylor = pairs[:, 0], pairs[:, 1]

    small = (alphas > 0.0) & (alphas <= 0.25)
    relative = np.abs(taylor[small] - exact[small]) / exact[small]

    dominated = bool(np.all(taylor >= exact))
    worst_small = float(relative.max())

    return CheckResult(
        name='taylor_dominance',
        passed=dominated and worst_small < 0.01,
        detail={
            'taylor_dominates': dominated,
            'max_relative_error_small_alpha': worst_small,
        },
    )


def _check_rotated_consistency(
    n_samples: int,
    seed: int,
    max_z_score: float,
) -> CheckResult:
    d = 64
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(d) * 1.25
    keys = rng.standard_normal((8, d)) * 1.25
    keys[:, 0] += 10.0
    spec = QuantSpec(bits=2, group_size=32, rotation=True, seed=seed)

    estimate = rotated_correction_consistency(
        q,
        keys,
        spec,
        build_rotation(d, seed),
        n_samples,
        seed,
    )
    z_score = estimate.z_score(1.0)

    return CheckResult(
        name='rotated_correction_consistency',
        passed=abs(z_score) <= max_z_score,
        detail={
            'mean': estimate.mean,
            'std_error': estimate.std_error,
            'z_score': z_score,
        },
    )


def run_acceptance_suite(
    seed: int,
    n_samples: int | None = None,
    n_partition_samples: int | None = None,
    max_z_score: float = 3.0,
) -> list[CheckResult]:
    n_samples = n_samples or settings.JENSENKV_MC_SAMPLES
    n_partition_samples = n_partition_samples or settings.JENSENKV_MC_PARTITION_SAMPLES

    checks = []

    with Timer() as timer:
        checks.append(_check_closed_form(n_samples, seed, max_z_score))
        checks.append(_check_partition_bias(n_partition_samples, seed))
        checks.append(_check_cgf_identity(seed))
        checks.append(_check_taylor_dominance())
        checks.append(_check_rotated_consistency(n_samples, seed, max_z_score))

    logger.info(
        'Acceptance suite: %d/%d passed by %.3fs',
        sum(check.passed for check in checks),
        len(checks),
        timer.elapsed,
    )

    return checks


def require_passed(
    checks: list[CheckResult],
) -> None:
    failed = [check.name for check in checks if not check.passed]

    if failed:
        raise AcceptanceError(failed)


def correction_overhead(
    config: WorkloadConfig,
    mode: CorrectionMode = CorrectionMode.TAYLOR,
    repeats: int = 5,
) -> dict[str, float]:
    """
    Best-of-`repeats` wall-clock time of `mode` relative to the uncorrected run
    over the same cache.
    """
    workload = generate_workload(config)
    attention_workload, rotation = workload.to_attention_workload()

    def best_time(run_mode: CorrectionMode) -> float:
        elapsed = []

        for _ in range(repeats):
            with Timer() as timer:
                attend(attention_workload, mode=run_mode, rotation=rotation)

            elapsed.append(timer.elapsed)

        return min(elapsed)

    # Warm-up
    attend(attention_workload, mode=mode, rotation=rotation)

    baseline = best_time(CorrectionMode.NONE)
    corrected = best_time(mode)

    return {
        'baseline_seconds': baseline,
        'corrected_seconds': corrected,
        'overhead': corrected / baseline - 1.0 if baseline > 0.0 else 0.0,
    }
