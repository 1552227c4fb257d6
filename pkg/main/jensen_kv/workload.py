"""
Synthetic attention workloads: Gaussian queries, keys and values with tunable
score scale and optional outlier key channels.
"""

import logging
from dataclasses import (
    dataclass,
)

import numpy as np

from main.jensen_kv.attention_engine import (
    AttentionWorkload,
    KVCache,
    write_chunk_to_cache,
)
from main.jensen_kv.rotation import (
    HadamardRotation,
    build_rotation,
)
from main.jensen_kv.schemas import (
    QuantSpec,
    WorkloadConfig,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class SyntheticWorkload:
    """Full-precision tensors; the first `n_cached` tokens form the cached block."""

    config: WorkloadConfig
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    outlier_channel_indices: tuple[int, ...] = ()

    @property
    def n_cached(self) -> int:
        return self.config.n_cached

    @property
    def cached_keys(self) -> np.ndarray:
        return self.keys[..., : self.n_cached, :]

    @property
    def cached_values(self) -> np.ndarray:
        return self.values[..., : self.n_cached, :]

    @property
    def current_keys(self) -> np.ndarray:
        return self.keys[..., self.n_cached :, :]

    @property
    def current_values(self) -> np.ndarray:
        return self.values[..., self.n_cached :, :]

    def to_attention_workload(
        self,
        spec: QuantSpec | None = None,
        quantize_values: bool | None = None,
    ) -> tuple[AttentionWorkload, HadamardRotation | None]:
        """
        Writes the cached block into a cache quantized with `spec` (the config's
        spec by default) and returns the workload with the matching rotation.
        """
        spec = spec or self.config.spec

        if quantize_values is None:
            quantize_values = self.config.quantize_values

        rotation = None

        if spec.rotation:
            rotation = build_rotation(self.config.head_dim, spec.seed)

        cache = None

        if self.n_cached > 0:
            cache = write_chunk_to_cache(
                self.cached_keys,
                self.cached_values,
                spec,
                rotation=rotation,
                quantize_values=quantize_values,
            )

        return (
            AttentionWorkload(
                queries=self.queries,
                cache=cache or KVCache(),
                current_keys=self.current_keys,
                current_values=self.current_values,
            ),
            rotation,
        )


def generate_workload(
    config: WorkloadConfig,
) -> SyntheticWorkload:
    """
    Q, K, V ~ N(0, 1) * score_scale, drawn in that order from PCG64(seed); outlier
    key channels get a constant offset of +-outlier_magnitude * score_scale.
    """
    rng = np.random.default_rng(config.seed)

    n_tokens = config.n_cached + config.n_current
    scale = config.score_scale

    queries = rng.standard_normal(
        (config.heads, config.n_queries, config.head_dim),
    ) * scale
    keys = rng.standard_normal(
        (config.heads, n_tokens, config.head_dim),
    ) * scale
    values = rng.standard_normal(
        (config.heads, n_tokens, config.value_dim),
    ) * scale

    outlier_indices: tuple[int, ...] = ()

    if config.outlier_channels > 0:
        channels = rng.choice(
            config.head_dim,
            size=config.outlier_channels,
            replace=False,
        )
        signs = rng.integers(0, 2, size=config.outlier_channels) * 2.0 - 1.0
        keys[..., channels] += signs * config.outlier_magnitude * scale
        outlier_indices = tuple(int(channel) for channel in np.sort(channels))

    logger.info(
        'Generated workload heads=%d M=%d |S|=%d |R|=%d d=%d seed=%d',
        config.heads,
        config.n_queries,
        config.n_cached,
        config.n_current,
        config.head_dim,
        config.seed,
    )

    return SyntheticWorkload(
        config=config,
        queries=queries,
        keys=keys,
        values=values,
        outlier_channel_indices=outlier_indices,
    )
