"""
Randomized Hadamard rotation H = (1/sqrt(d)) * H_walsh * diag(signs).

Signs come from numpy's PCG64 generator (`numpy.random.default_rng(seed)`), whose
stream is fixed for a given seed across platforms.
"""

import logging
from dataclasses import (
    dataclass,
)

import numpy as np

from main.jensen_kv.errors import (
    RotationError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class HadamardRotation:
    d: int
    signs: np.ndarray
    seed: int | None = None


def _is_power_of_two(
    value: int,
) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def build_rotation(
    d: int,
    seed: int,
) -> HadamardRotation:
    if not _is_power_of_two(d):
        raise RotationError(f'Head dimension must be a power of two, got {d}')

    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=d).astype(np.float64) * 2.0 - 1.0
    signs.setflags(write=False)

    return HadamardRotation(
        d=d,
        signs=signs,
        seed=seed,
    )


def fast_walsh_hadamard(
    x: np.ndarray,
) -> np.ndarray:
    """
    Unnormalized Walsh-Hadamard transform along the last axis, O(d log d).
    """
    values = np.array(x, dtype=np.float64)
    d = values.shape[-1]

    if not _is_power_of_two(d):
        raise RotationError(f'Length must be a power of two, got {d}')

    lead = values.shape[:-1]
    half = 1

    while half < d:
        blocks = values.reshape(*lead, d // (2 * half), 2, half)
        upper = blocks[..., 0, :]
        lower = blocks[..., 1, :]
        values = np.stack(
            (upper + lower, upper - lower),
            axis=-2,
        ).reshape(*lead, d)
        half *= 2

    return values


def _check_length(
    x: np.ndarray,
    rotation: HadamardRotation,
) -> None:
    if x.shape[-1] != rotation.d:
        raise ShapeMismatchError(
            f'Vector length {x.shape[-1]} does not match rotation dim {rotation.d}',
        )


def rotate(
    x: np.ndarray,
    rotation: HadamardRotation,
) -> np.ndarray:
    """Applies H to the last axis."""
    values = np.asarray(x, dtype=np.float64)
    _check_length(values, rotation)

    return fast_walsh_hadamard(values * rotation.signs) / np.sqrt(rotation.d)


def inverse_rotate(
    x: np.ndarray,
    rotation: HadamardRotation,
) -> np.ndarray:
    """Applies H^T to the last axis."""
    values = np.asarray(x, dtype=np.float64)
    _check_length(values, rotation)

    return fast_walsh_hadamard(values) / np.sqrt(rotation.d) * rotation.signs


def group_squared_norms(
    q: np.ndarray,
    group_width: int,
) -> np.ndarray:
    """||q_j||^2 per group of `group_width` consecutive channels."""
    values = np.asarray(q, dtype=np.float64)
    d = values.shape[-1]

    if d % group_width != 0:
        raise ShapeMismatchError(
            f'Group width {group_width} does not divide dimension {d}',
        )

    return np.square(values).reshape(
        *values.shape[:-1],
        d // group_width,
        group_width,
    ).sum(axis=-1)
