"""
Correction of the exponential (Jensen) bias of quantized cached-key scores.

For a cached key with per-channel step sizes delta_c and a query q, the score
noise is delta = q^T eps / sqrt(d) with eps_c ~ U(-delta_c/2, delta_c/2). The
per-score correction b = log E[exp(delta)] makes E[exp(s_hat - b)] = exp(s).

All functions accept leading batch axes; the channel axis is last.
"""

import logging

import numpy as np

from constants.quantization import (
    QuantizationConstants,
)
from enumerations import (
    CorrectionForm,
)
from main.jensen_kv.errors import (
    QuantizationError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)


def log_sinhc(
    alpha: np.ndarray | float,
) -> np.ndarray | float:
    """
    log(sinh(a) / a), even in a, 0 at a = 0, overflow-free for large |a|.
    """
    a = np.abs(np.asarray(alpha, dtype=np.float64))
    small = a < QuantizationConstants.ExactCorrectionSeriesSwitch

    # Placeholder argument keeps the closed form well-defined on the small branch
    safe = np.where(small, 1.0, a)
    closed_form = safe + np.log(-np.expm1(-2.0 * safe) / safe) - np.log(2.0)

    a2 = a * a
    series = a2 / 6.0 - a2 * a2 / 180.0

    result = np.where(small, series, closed_form)

    if np.ndim(alpha) == 0:
        return float(result)

    return result


def _validated(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)

    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(deltas))):
        raise QuantizationError('Correction inputs must be finite')

    if np.any(deltas < 0.0):
        raise QuantizationError('Step sizes must be non-negative')

    if q.shape[-1] != d or deltas.shape[-1] != d:
        raise ShapeMismatchError(
            f'Expected channel axis of length {d}'
            f', got q {q.shape} and deltas {deltas.shape}',
        )

    return q, deltas


def scaled_alphas(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray:
    """alpha_c = q_c * delta_c / (2 sqrt(d))."""
    q, deltas = _validated(q, deltas, d)

    return q / (2.0 * np.sqrt(d)) * deltas


def _weighted_square_sum(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray:
    q, deltas = _validated(q, deltas, d)

    return np.sum(np.square(q * deltas), axis=-1)


def exact_correction(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray | float:
    """b = sum_c log(sinh(alpha_c) / alpha_c)."""
    result = np.sum(
        log_sinhc(scaled_alphas(q, deltas, d)),
        axis=-1,
    )

    return float(result) if np.ndim(result) == 0 else result


def taylor_correction(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray | float:
    """b = (1 / 24d) sum_c q_c^2 delta_c^2, i.e. half the score noise variance."""
    result = _weighted_square_sum(q, deltas, d) / (24.0 * d)

    return float(result) if np.ndim(result) == 0 else result


def score_noise_variance(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray | float:
    result = _weighted_square_sum(q, deltas, d) / (12.0 * d)

    return float(result) if np.ndim(result) == 0 else result


def grouped_taylor_correction(
    q_group_norms: np.ndarray,
    group_deltas: np.ndarray,
    d: int,
) -> np.ndarray | float:
    """
    b = (1 / 24d) sum_j delta_j^2 ||q_j||^2 over G = d / g groups.
    """
    norms = np.asarray(q_group_norms, dtype=np.float64)
    group_deltas = np.asarray(group_deltas, dtype=np.float64)

    if norms.shape[-1] != group_deltas.shape[-1]:
        raise ShapeMismatchError(
            f'Group count mismatch: {norms.shape[-1]} query norms'
            f' vs {group_deltas.shape[-1]} step sizes',
        )

    if np.any(group_deltas < 0.0):
        raise QuantizationError('Step sizes must be non-negative')

    result = np.sum(np.square(group_deltas) * norms, axis=-1) / (24.0 * d)

    return float(result) if np.ndim(result) == 0 else result


def per_channel_correction(
    q: np.ndarray,
    channel_deltas: np.ndarray,
    d: int,
    form: CorrectionForm = CorrectionForm.TAYLOR,
) -> np.ndarray | float:
    """
    One scalar per query shared by every cached token whose step sizes depend on
    the channel only.
    """
    if form == CorrectionForm.EXACT:
        return exact_correction(q, channel_deltas, d)

    return taylor_correction(q, channel_deltas, d)


def expected_inflation_factor(
    q: np.ndarray,
    deltas: np.ndarray,
    d: int,
) -> np.ndarray | float:
    """Closed-form E[exp(delta)] = prod_c sinh(alpha_c) / alpha_c."""
    return np.exp(exact_correction(q, deltas, d))


def exact_vs_taylor_curve(
    alphas: list[float] | np.ndarray,
) -> list[tuple[float, float]]:
    values = np.asarray(alphas, dtype=np.float64)
    exact = np.atleast_1d(log_sinhc(values))
    taylor = np.atleast_1d(np.square(values) / 6.0)

    return [
        (float(exact_value), float(taylor_value))
        for exact_value, taylor_value in zip(exact, taylor, strict=True)
    ]
