"""
Attention-level measurements of a quantized (corrected or not) run against the
full-precision reference: cached attention mass, its shift, Jensen-Shannon
divergence of the weights and attention-output MSE.

Weight arrays may carry any leading axes; the key axis is last and the first
`split_index` keys form the cached block.
"""

import logging
import math
from dataclasses import (
    dataclass,
    field,
)
from typing import Any

import numpy as np

from constants.report import (
    ReportConstants,
)
from main.jensen_kv.errors import (
    JensenKvError,
    ShapeMismatchError,
)
from settings import settings

logger = logging.getLogger(__name__)


def _check_row_stochastic(
    weights: np.ndarray,
) -> None:
    row_sums = weights.sum(axis=-1)

    if np.any(np.abs(row_sums - 1.0) > ReportConstants.RowSumTolerance):
        raise JensenKvError('Attention weights are not row-normalized')


def attention_mass(
    weights_row: np.ndarray,
    split_index: int,
) -> tuple[np.ndarray | float, np.ndarray | float]:
    """(P_S, P_R): mass on the first `split_index` keys and on the rest."""
    weights = np.asarray(weights_row, dtype=np.float64)

    if not 0 <= split_index <= weights.shape[-1]:
        raise ShapeMismatchError(
            f'Split {split_index} outside row of length {weights.shape[-1]}',
        )

    _check_row_stochastic(weights)

    cached_mass = weights[..., :split_index].sum(axis=-1)
    current_mass = 1.0 - cached_mass

    if np.ndim(cached_mass) == 0:
        return float(cached_mass), float(current_mass)

    return cached_mass, current_mass


def attention_mass_decomposition(
    scores_row: np.ndarray,
    split_index: int,
) -> dict[str, float]:
    """
    Partition sums of one score row. Sums are reported relative to exp(max score),
    which is returned as `log_offset`.
    """
    scores = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    log_offset = float(scores.max())
    exponentials = np.exp(scores - log_offset)

    cached_sum = float(exponentials[:split_index].sum())
    current_sum = float(exponentials[split_index:].sum())
    total = cached_sum + current_sum

    return {
        'Z_S': cached_sum,
        'Z_R': current_sum,
        'Z': total,
        'P_S': cached_sum / total,
        'log_offset': log_offset,
    }


def attention_mass_shift(
    ref_weights: np.ndarray,
    test_weights: np.ndarray,
    split_index: int,
) -> np.ndarray:
    """Delta P_S = P_S(test) - P_S(ref), one value per query row."""
    ref_weights = np.asarray(ref_weights, dtype=np.float64)
    test_weights = np.asarray(test_weights, dtype=np.float64)

    if ref_weights.shape != test_weights.shape:
        raise ShapeMismatchError(
            f'Weight shapes differ: {ref_weights.shape} vs {test_weights.shape}',
        )

    ref_mass, _ = attention_mass(ref_weights, split_index)
    test_mass, _ = attention_mass(test_weights, split_index)

    return np.asarray(test_mass) - np.asarray(ref_mass)


def _kl_base2(
    p: np.ndarray,
    m: np.ndarray,
) -> np.ndarray:
    safe_m = np.where(p > 0.0, m, 1.0)
    safe_p = np.where(p > 0.0, p, 1.0)

    return np.sum(
        np.where(p > 0.0, p * np.log2(safe_p / safe_m), 0.0),
        axis=-1,
    )


def jensen_shannon_divergence(
    p: np.ndarray,
    q: np.ndarray,
) -> np.ndarray | float:
    """Base-2 JSD along the last axis, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)

    if p.shape != q.shape:
        raise ShapeMismatchError(f'Distribution shapes differ: {p.shape} vs {q.shape}')

    if np.any(p < 0.0) or np.any(q < 0.0):
        raise JensenKvError('Distributions must be non-negative')

    m = 0.5 * (p + q)
    divergence = 0.5 * _kl_base2(p, m) + 0.5 * _kl_base2(q, m)
    divergence = np.clip(divergence, 0.0, 1.0)

    if np.ndim(divergence) == 0:
        return float(divergence)

    return divergence


def attention_output_mse(
    ref_output: np.ndarray,
    test_output: np.ndarray,
) -> float:
    ref_output = np.asarray(ref_output, dtype=np.float64)
    test_output = np.asarray(test_output, dtype=np.float64)

    if ref_output.shape != test_output.shape:
        raise ShapeMismatchError(
            f'Output shapes differ: {ref_output.shape} vs {test_output.shape}',
        )

    return float(np.mean(np.square(test_output - ref_output)))


def nearest_rank_percentile(
    sorted_values: np.ndarray,
    percentile: float,
) -> float:
    """
    Smallest value whose cumulative share exceeds `percentile` percent.
    """
    n = sorted_values.size
    index = min(n - 1, math.floor(percentile * n / 100.0))

    return float(sorted_values[index])


@dataclass(frozen=True, slots=True)
class Summary:
    mean: float
    median: float
    p5: float
    p95: float
    histogram_edges: list[float] = field(default_factory=list)
    histogram_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            'mean': self.mean,
            'median': self.median,
            'p5': self.p5,
            'p95': self.p95,
            'histogram': {
                'edges': self.histogram_edges,
                'counts': self.histogram_counts,
            },
        }


def summarize(
    values: np.ndarray | list[float],
    bins: int | None = None,
    value_range: tuple[float, float] | None = None,
) -> Summary:
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))

    if values.size == 0:
        raise JensenKvError('Cannot summarize an empty sequence')

    bins = bins or settings.JENSENKV_HISTOGRAM_BINS

    if value_range is None:
        value_range = (float(values[0]), float(values[-1]))

    if value_range[0] == value_range[1]:
        value_range = (value_range[0] - 0.5, value_range[1] + 0.5)

    counts, edges = np.histogram(
        values,
        bins=bins,
        range=value_range,
    )

    return Summary(
        mean=float(values.mean()),
        median=float(np.median(values)),
        p5=nearest_rank_percentile(values, 5),
        p95=nearest_rank_percentile(values, 95),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
    )


@dataclass(slots=True)
class DiagnosticsReport:
    p_s_ref: np.ndarray
    p_s_hat: np.ndarray
    delta_p_s: np.ndarray
    jsd: np.ndarray
    output_mse: float
    config: dict[str, Any] = field(default_factory=dict)
    cost: dict[str, Any] = field(default_factory=dict)

    @property
    def delta_p_s_summary(self) -> Summary:
        return summarize(self.delta_p_s, value_range=(-1.0, 1.0))

    @property
    def jsd_mean(self) -> float:
        return float(np.mean(self.jsd))

    @property
    def jsd_median(self) -> float:
        return float(np.median(self.jsd))

    def to_dict(
        self,
        per_query_limit: int | None = None,
    ) -> dict[str, Any]:
        if per_query_limit is None:
            per_query_limit = settings.JENSENKV_PER_QUERY_REPORT_LIMIT

        payload: dict[str, Any] = {
            'schema_version': ReportConstants.SchemaVersion,
            'config': self.config,
            'summaries': {
                'delta_p_s': self.delta_p_s_summary.to_dict(),
                'p_s_ref_mean': float(np.mean(self.p_s_ref)),
                'p_s_hat_mean': float(np.mean(self.p_s_hat)),
            },
            'jsd': {
                'mean': self.jsd_mean,
                'median': self.jsd_median,
            },
            'output_mse': self.output_mse,
            'cost': self.cost,
        }

        if self.delta_p_s.size <= per_query_limit:
            payload['per_query'] = {
                'P_S_ref': self.p_s_ref.tolist(),
                'P_S_hat': self.p_s_hat.tolist(),
                'delta_P_S': self.delta_p_s.tolist(),
                'jsd': self.jsd.tolist(),
            }

        return payload


def build_report(
    ref_weights: np.ndarray,
    test_weights: np.ndarray,
    ref_output: np.ndarray,
    test_output: np.ndarray,
    split_index: int,
    config: dict[str, Any] | None = None,
    cost: dict[str, Any] | None = None,
) -> DiagnosticsReport:
    n_keys = ref_weights.shape[-1]
    ref_rows = np.asarray(ref_weights, dtype=np.float64).reshape(-1, n_keys)
    test_rows = np.asarray(test_weights, dtype=np.float64).reshape(-1, n_keys)

    p_s_ref, _ = attention_mass(ref_rows, split_index)
    p_s_hat, _ = attention_mass(test_rows, split_index)

    return DiagnosticsReport(
        p_s_ref=np.asarray(p_s_ref),
        p_s_hat=np.asarray(p_s_hat),
        delta_p_s=np.asarray(p_s_hat) - np.asarray(p_s_ref),
        jsd=np.asarray(jensen_shannon_divergence(ref_rows, test_rows)),
        output_mse=attention_output_mse(ref_output, test_output),
        config=config or {},
        cost=cost or {},
    )
