"""
Tests for configuration schemas and synthetic workload generation.
"""

import numpy as np
import pytest
from pydantic import (
    ValidationError,
)

from enumerations import (
    CorrectionMode,
    Granularity,
)
from main.jensen_kv.attention_engine import (
    reference_attention,
)
from main.jensen_kv.diagnostics import (
    attention_mass,
)
from main.jensen_kv.quant_core import (
    FullPrecisionTokenBlock,
    QuantizedTokenBlock,
)
from main.jensen_kv.schemas import (
    QuantSpec,
    WorkloadConfig,
)
from main.jensen_kv.workload import (
    generate_workload,
)

SMALL_CONFIG = WorkloadConfig(
    n_queries=8,
    n_cached=32,
    n_current=16,
    head_dim=64,
    value_dim=64,
    heads=2,
    seed=3,
)


class TestQuantSpec:
    """Validation of quantization settings."""

    def test_defaults(self):
        """Two-bit codes in groups of 32 per token."""
        spec = QuantSpec()

        assert spec.bits == 2
        assert spec.group_size == 32
        assert spec.granularity == Granularity.PER_TOKEN_GROUPED
        assert spec.max_code == 3
        assert spec.integer_zero_point is False

    @pytest.mark.parametrize('bits', [1, 5, 16])
    def test_unsupported_bits(self, bits):
        """Only 2, 3, 4 and 8 bits are supported."""
        with pytest.raises(ValidationError):
            QuantSpec(bits=bits)

    def test_extra_field(self):
        """Unknown fields are rejected."""
        with pytest.raises(ValidationError):
            QuantSpec(bits=2, scale='fp8')

    def test_frozen(self):
        """Specs are immutable."""
        spec = QuantSpec()

        with pytest.raises(ValidationError):
            spec.bits = 4

    def test_group_must_divide(self):
        """check_dim rejects non-dividing group sizes."""
        with pytest.raises(ValueError):
            QuantSpec(group_size=48).check_dim(128)


class TestWorkloadConfig:
    """Validation and JSON round trip of the workload config."""

    def test_json_roundtrip(self):
        """Configs survive a JSON round trip."""
        config = SMALL_CONFIG.model_copy(
            update={
                'mode': CorrectionMode.EXACT,
                'spec': QuantSpec(bits=4, rotation=True, seed=9),
            },
        )

        restored = WorkloadConfig.model_validate_json(config.model_dump_json())

        assert restored == config

    def test_enum_values_in_json(self):
        """Enums serialize as their string values."""
        payload = SMALL_CONFIG.model_dump(mode='json')

        assert payload['mode'] == 'taylor'
        assert payload['spec']['granularity'] == 'per-token-grouped'

    def test_group_size_must_divide_head_dim(self):
        """Group size must divide head_dim."""
        with pytest.raises(ValidationError):
            WorkloadConfig(head_dim=64, spec=QuantSpec(group_size=48))

    def test_too_many_outliers(self):
        """Outlier channels cannot exceed head_dim."""
        with pytest.raises(ValidationError):
            WorkloadConfig(head_dim=64, value_dim=64, outlier_channels=65)

    def test_needs_current_token(self):
        """At least one current token is required."""
        with pytest.raises(ValidationError):
            WorkloadConfig(n_current=0)

    def test_unquantized_values_skip_value_dim_check(self):
        """Unquantized values may have any width."""
        config = WorkloadConfig(head_dim=64, value_dim=48, quantize_values=False)

        assert config.value_dim == 48


class TestGenerateWorkload:
    """Seeded Gaussian tensors."""

    def test_shapes(self):
        """Queries, keys and values have the configured shapes."""
        workload = generate_workload(SMALL_CONFIG)

        assert workload.queries.shape == (2, 8, 64)
        assert workload.keys.shape == (2, 48, 64)
        assert workload.values.shape == (2, 48, 64)
        assert workload.cached_keys.shape == (2, 32, 64)
        assert workload.current_values.shape == (2, 16, 64)

    def test_deterministic(self):
        """Same config, same tensors."""
        first = generate_workload(SMALL_CONFIG)
        second = generate_workload(SMALL_CONFIG)

        np.testing.assert_array_equal(first.queries, second.queries)
        np.testing.assert_array_equal(first.keys, second.keys)
        np.testing.assert_array_equal(first.values, second.values)

    def test_seed_changes_tensors(self):
        """Another seed gives other tensors."""
        first = generate_workload(SMALL_CONFIG)
        second = generate_workload(SMALL_CONFIG.model_copy(update={'seed': 4}))

        assert not np.array_equal(first.keys, second.keys)

    def test_outlier_channels(self):
        """Outlier channels carry a large mean offset."""
        config = SMALL_CONFIG.model_copy(
            update={'outlier_channels': 2, 'outlier_magnitude': 10.0},
        )

        workload = generate_workload(config)
        channel_means = np.abs(workload.keys.mean(axis=(0, 1)))

        assert len(workload.outlier_channel_indices) == 2
        for channel in workload.outlier_channel_indices:
            assert channel_means[channel] > 10.0
        assert np.median(channel_means) < 1.0

    def test_zero_scale_gives_uniform_attention(self):
        """A zero score scale gives uniform attention."""
        config = SMALL_CONFIG.model_copy(update={'score_scale': 0.0})
        workload = generate_workload(config)

        _, weights = reference_attention(
            workload.queries,
            workload.keys,
            workload.values,
            return_weights=True,
        )

        np.testing.assert_allclose(weights, 1.0 / 48)

    def test_default_cached_mass_near_token_share(self):
        """Baseline cached mass stays within 0.2 of |S| / (|S| + |R|)."""
        config = WorkloadConfig()
        workload = generate_workload(config)

        _, weights = reference_attention(
            workload.queries,
            workload.keys,
            workload.values,
            return_weights=True,
        )
        cached_mass, _ = attention_mass(weights, config.n_cached)
        token_share = config.n_cached / (config.n_cached + config.n_current)

        assert abs(float(np.mean(cached_mass)) - token_share) < 0.2


class TestToAttentionWorkload:
    """Cache construction from a synthetic workload."""

    def test_quantized_cache(self):
        """Keys and values are quantized by default."""
        workload, rotation = generate_workload(SMALL_CONFIG).to_attention_workload()

        assert rotation is None
        assert workload.cache.n_tokens == 32
        assert isinstance(workload.cache.keys, QuantizedTokenBlock)
        assert isinstance(workload.cache.values, QuantizedTokenBlock)

    def test_rotation_follows_spec(self):
        """The cache is rotated with the QuantSpec seed."""
        spec = QuantSpec(rotation=True, seed=21)

        workload, rotation = generate_workload(SMALL_CONFIG).to_attention_workload(
            spec=spec,
        )

        assert rotation is not None
        assert rotation.seed == 21
        assert workload.cache.rotation_seed == 21

    def test_full_precision_values(self):
        """Values can stay unquantized."""
        workload, _ = generate_workload(SMALL_CONFIG).to_attention_workload(
            quantize_values=False,
        )

        assert isinstance(workload.cache.values, FullPrecisionTokenBlock)

    def test_empty_cache(self):
        """n_cached = 0 gives an empty cache."""
        config = SMALL_CONFIG.model_copy(update={'n_cached': 0})

        workload, _ = generate_workload(config).to_attention_workload()

        assert workload.cache.n_tokens == 0
        assert workload.current_keys.shape == (2, 16, 64)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
