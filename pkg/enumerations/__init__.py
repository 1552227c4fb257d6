"""
Enumerations for the quantized KV-cache attention library.
"""

from enum import (
    IntEnum,
)

from enumerations._compat import (
    StrEnum,
)

from enumerations.quantization import (
    Granularity,
    ScaleFormat,
    ZeroPointFormat,
)

__all__ = [
    'CorrectionForm',
    'CorrectionMode',
    'Granularity',
    'ScaleFormat',
    'TensorDtype',
    'ZeroPointFormat',
]


class CorrectionMode(StrEnum):
    NONE = 'none'
    EXACT = 'exact'
    TAYLOR = 'taylor'
    PER_CHANNEL_TAYLOR = 'per-channel-taylor'


class CorrectionForm(StrEnum):
    """Closed form used by per-channel correction."""

    EXACT = 'exact'
    TAYLOR = 'taylor'


class TensorDtype(IntEnum):
    FLOAT32 = 0
