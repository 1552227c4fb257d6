from pydantic import (
    Field,
)
from pydantic_settings import (
    BaseSettings,
    SettingsConfigDict,
)


class Settings(BaseSettings):
    """Application configuration."""

    # Caps BLAS / OpenMP / Polars worker threads (None = library defaults)
    JENSENKV_THREADS: int | None = Field(
        default=None,
        ge=1,
    )

    # Default directory for CLI artifacts when --out is not given
    JENSENKV_OUTPUT_DIR: str = 'data/runs'

    # Per-query arrays are embedded in JSON reports only up to this many rows
    JENSENKV_PER_QUERY_REPORT_LIMIT: int = 4096
    JENSENKV_HISTOGRAM_BINS: int = 41

    # Monte Carlo defaults (closed-form checks / partition-sum unbiasedness)
    JENSENKV_MC_SAMPLES: int = 1_000_000
    JENSENKV_MC_PARTITION_SAMPLES: int = 100_000
    # Draws are streamed in chunks of this many samples to bound memory
    JENSENKV_MC_CHUNK_SIZE: int = 65_536

    # Query rows processed per block when applying score corrections
    JENSENKV_QUERY_BLOCK_SIZE: int = 64

    model_config = SettingsConfigDict(
        env_file='.env',
        extra='forbid',
    )


settings = Settings()  # noqa
