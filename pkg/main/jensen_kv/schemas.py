"""
Configuration schemas (quantization spec, synthetic workload config).
"""

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    model_validator,
)

from constants.common import (
    CommonConstants,
)
from constants.quantization import (
    QuantizationConstants,
)
from enumerations import (
    CorrectionMode,
    Granularity,
    ScaleFormat,
    ZeroPointFormat,
)


class QuantSpec(BaseModel):
    """Integer KV-cache quantization settings."""

    model_config = ConfigDict(
        frozen=True,
        extra='forbid',
    )

    bits: int = Field(default=2, description='Code width B')
    group_size: int = Field(default=32, ge=1, description='Group size g')
    granularity: Granularity = Field(default=Granularity.PER_TOKEN_GROUPED)
    scale_format: ScaleFormat = Field(default=ScaleFormat.FP8_E4M3_EMULATED)
    zeropoint_format: ZeroPointFormat = Field(default=ZeroPointFormat.BF16_EMULATED)
    integer_zero_point: bool = Field(
        default=False,
        description='Round z to an integer so exact zeros dequantize to zero',
    )
    rotation: bool = Field(default=False, description='Randomized Hadamard rotation')
    seed: int = Field(default=CommonConstants.DefaultSeed, ge=0, lt=2**64)

    @model_validator(mode='after')
    def _check_bits(self) -> 'QuantSpec':
        if self.bits not in QuantizationConstants.SupportedBits:
            raise ValueError(
                f'bits must be one of {QuantizationConstants.SupportedBits}'
                f', got {self.bits}',
            )

        return self

    @property
    def max_code(self) -> int:
        return (1 << self.bits) - 1

    def check_dim(
        self,
        d: int,
    ) -> None:
        if d % self.group_size != 0:
            raise ValueError(
                f'group size {self.group_size} does not divide dimension {d}',
            )


class WorkloadConfig(BaseModel):
    """Synthetic attention workload plus the quantization/correction settings."""

    model_config = ConfigDict(
        frozen=True,
        extra='forbid',
    )

    n_queries: int = Field(default=CommonConstants.DefaultQueryCount, ge=1)
    n_cached: int = Field(default=CommonConstants.DefaultCachedTokenCount, ge=0)
    n_current: int = Field(default=CommonConstants.DefaultCurrentTokenCount, ge=1)
    head_dim: int = Field(default=CommonConstants.DefaultHeadDim, ge=1)
    value_dim: int = Field(default=CommonConstants.DefaultHeadDim, ge=1)
    heads: int = Field(default=CommonConstants.DefaultHeadCount, ge=1)
    score_scale: float = Field(default=CommonConstants.DefaultScoreScale, ge=0.0)
    outlier_channels: int = Field(default=0, ge=0)
    outlier_magnitude: float = Field(default=10.0, ge=0.0)
    quantize_values: bool = Field(default=True)
    seed: int = Field(default=CommonConstants.DefaultSeed, ge=0, lt=2**64)
    spec: QuantSpec = Field(default_factory=QuantSpec)
    mode: CorrectionMode = Field(default=CorrectionMode.TAYLOR)

    @model_validator(mode='after')
    def _check_dims(self) -> 'WorkloadConfig':
        if self.outlier_channels > self.head_dim:
            raise ValueError(
                f'outlier_channels {self.outlier_channels} exceeds head_dim'
                f' {self.head_dim}',
            )

        self.spec.check_dim(self.head_dim)

        if (
            self.quantize_values
            and self.spec.granularity == Granularity.PER_TOKEN_GROUPED
        ):
            self.spec.check_dim(self.value_dim)

        return self
