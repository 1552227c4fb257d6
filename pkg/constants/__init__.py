from constants.common import (
    CommonConstants,
)
from constants.quantization import (
    QuantizationConstants,
)
from constants.report import (
    ArtifactConstants,
    ReportConstants,
    TensorFileConstants,
)

__all__ = [
    'ArtifactConstants',
    'CommonConstants',
    'QuantizationConstants',
    'ReportConstants',
    'TensorFileConstants',
]
