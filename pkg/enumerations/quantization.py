"""
Enumerations for quantization layout and metadata storage formats.
"""

from enumerations._compat import StrEnum


class Granularity(StrEnum):
    """Which axis shares one (scale, zero-point) pair."""

    PER_TOKEN_GROUPED = 'per-token-grouped'
    PER_CHANNEL = 'per-channel'


class ScaleFormat(StrEnum):
    FP8_E4M3_EMULATED = 'fp8-e4m3-emulated'
    FULL_PRECISION = 'full-precision'


class ZeroPointFormat(StrEnum):
    BF16_EMULATED = 'bf16-emulated'
    FULL_PRECISION = 'full-precision'
