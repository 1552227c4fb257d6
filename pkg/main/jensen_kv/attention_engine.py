"""
Reference softmax attention over a quantized cached block S and a full-precision
current block R.

Scores are computed over the concatenation [dequant(K_S); K_R], the correction is
subtracted from the first |S| columns only, then a row-max-stabilized softmax
weights the concatenated values. Arrays carry a leading head axis:
queries (H, M, d), keys (H, N, d), values (H, N, d_v).
"""

import logging
from dataclasses import (
    dataclass,
    field,
    replace,
)

import numpy as np

from enumerations import (
    CorrectionForm,
    CorrectionMode,
    Granularity,
)
from main.jensen_kv.bias_correction import (
    exact_correction,
    per_channel_correction,
)
from main.jensen_kv.errors import (
    QuantizationError,
    RotationError,
    ShapeMismatchError,
)
from main.jensen_kv.quant_core import (
    FullPrecisionTokenBlock,
    QuantizedTokenBlock,
    TokenBlock,
    concat_blocks,
    quantize_block,
)
from main.jensen_kv.rotation import (
    HadamardRotation,
    group_squared_norms,
    rotate,
)
from main.jensen_kv.schemas import (
    QuantSpec,
)
from settings import settings

logger = logging.getLogger(__name__)

# Upper bound on the (rows x cached tokens x d) alpha tensor of the exact form
_EXACT_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True, slots=True)
class KVCache:
    keys: TokenBlock | None = None
    values: TokenBlock | None = None
    rotation_seed: int | None = None

    @property
    def n_tokens(self) -> int:
        if self.keys is None:
            return 0

        return self.keys.n_tokens


@dataclass(frozen=True, slots=True)
class AttentionWorkload:
    queries: np.ndarray
    cache: KVCache
    current_keys: np.ndarray
    current_values: np.ndarray

    @property
    def d(self) -> int:
        return self.queries.shape[-1]

    @property
    def d_v(self) -> int:
        return self.current_values.shape[-1]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d)


@dataclass(slots=True)
class CostCounters:
    """Multiply-add counts of the score matmul and of the correction."""

    score_ops: int = 0
    correction_ops: int = 0

    @property
    def correction_ratio(self) -> float:
        if self.score_ops == 0:
            return 0.0

        return self.correction_ops / self.score_ops

    def to_dict(self) -> dict[str, float]:
        return {
            'score_ops': self.score_ops,
            'correction_ops': self.correction_ops,
            'correction_ratio': self.correction_ratio,
        }


@dataclass(slots=True)
class AttentionResult:
    output: np.ndarray
    n_cached: int
    cost: CostCounters = field(default_factory=CostCounters)
    weights: np.ndarray | None = None
    scores: np.ndarray | None = None


def _append_block(
    existing: TokenBlock | None,
    incoming: TokenBlock,
) -> TokenBlock:
    if existing is None:
        return incoming

    if isinstance(existing, QuantizedTokenBlock) and isinstance(
        incoming,
        QuantizedTokenBlock,
    ):
        return concat_blocks(existing, incoming)

    if isinstance(existing, FullPrecisionTokenBlock) and isinstance(
        incoming,
        FullPrecisionTokenBlock,
    ):
        return FullPrecisionTokenBlock(
            values=np.concatenate([existing.values, incoming.values], axis=-2),
        )

    raise QuantizationError('Cannot mix quantized and full-precision cache blocks')


def _encode(
    x: np.ndarray,
    spec: QuantSpec | None,
) -> TokenBlock:
    if spec is None:
        return FullPrecisionTokenBlock(
            values=np.asarray(x, dtype=np.float64),
        )

    return quantize_block(x, spec)


def write_chunk_to_cache(
    keys: np.ndarray,
    values: np.ndarray,
    spec: QuantSpec | None,
    rotation: HadamardRotation | None = None,
    cache: KVCache | None = None,
    quantize_values: bool = True,
) -> KVCache:
    """
    Rotates (optionally) and quantizes one finished chunk, returning a new cache
    with the chunk appended. `spec=None` stores the chunk unquantized.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    cache = cache or KVCache()

    if keys.shape[:-1] != values.shape[:-1]:
        raise ShapeMismatchError(
            f'Keys {keys.shape} and values {values.shape} disagree on tokens',
        )

    rotation_seed = None if rotation is None else rotation.seed

    if cache.keys is not None and cache.rotation_seed != rotation_seed:
        raise RotationError(
            f'Cache was written with rotation seed {cache.rotation_seed}'
            f', chunk uses {rotation_seed}',
        )

    if rotation is not None:
        keys = rotate(keys, rotation)

    key_block = _encode(keys, spec)
    value_block = _encode(values, spec if quantize_values else None)

    logger.info(
        'Cached chunk of %d tokens (bits=%s, rotation_seed=%s)',
        keys.shape[-2],
        None if spec is None else spec.bits,
        rotation_seed,
    )

    return replace(
        cache,
        keys=_append_block(cache.keys, key_block),
        values=_append_block(cache.values, value_block),
        rotation_seed=rotation_seed,
    )


def attention_scores(
    queries: np.ndarray,
    keys: np.ndarray,
) -> np.ndarray:
    d = queries.shape[-1]

    return np.matmul(queries, np.swapaxes(keys, -1, -2)) / np.sqrt(d)


def stable_softmax(
    scores: np.ndarray,
) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exponentials = np.exp(shifted)

    return exponentials / exponentials.sum(axis=-1, keepdims=True)


def _softmax_attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    n_cached: int,
    correct_scores,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = attention_scores(queries, keys)

    if correct_scores is not None and n_cached > 0:
        correct_scores(scores[..., :n_cached])

    weights = stable_softmax(scores)
    output = np.matmul(weights, values)

    return output, weights, scores


def reference_attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    return_weights: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Plain full-precision softmax attention."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)

    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeMismatchError(
            f'Query dim {queries.shape[-1]} != key dim {keys.shape[-1]}',
        )

    if keys.shape[:-1] != values.shape[:-1]:
        raise ShapeMismatchError(
            f'Keys {keys.shape} and values {values.shape} disagree on tokens',
        )

    if keys.shape[-2] == 0:
        raise ShapeMismatchError('Attention needs at least one key')

    output, weights, _ = _softmax_attention(
        queries,
        keys,
        values,
        n_cached=0,
        correct_scores=None,
    )

    if return_weights:
        return output, weights

    return output


def _row_blocks(
    n_rows: int,
    block_size: int,
):
    block_size = max(1, block_size)

    for start in range(0, n_rows, block_size):
        yield start, min(start + block_size, n_rows)


def _taylor_corrector(
    queries: np.ndarray,
    key_block: TokenBlock,
    cost: CostCounters,
):
    h, m, d = queries.shape
    group_width = key_block.group_width

    # Per-query group norms O(M d), per-key delta^2 / 24d O(S G)
    query_norms = group_squared_norms(queries, group_width)
    key_terms = np.square(key_block.group_deltas()) / (24.0 * d)
    n_cached, n_groups = key_terms.shape[-2:]

    cost.correction_ops += h * (m * d + n_cached * n_groups + m * n_cached * n_groups)

    key_terms_t = np.swapaxes(key_terms, -1, -2)

    def correct(cached_scores: np.ndarray) -> None:
        for start, stop in _row_blocks(m, settings.JENSENKV_QUERY_BLOCK_SIZE):
            cached_scores[..., start:stop, :] -= np.matmul(
                query_norms[..., start:stop, :],
                key_terms_t,
            )

    return correct


def _exact_corrector(
    queries: np.ndarray,
    key_block: TokenBlock,
    cost: CostCounters,
):
    h, m, d = queries.shape
    channel_deltas = key_block.channel_deltas()
    n_cached = channel_deltas.shape[-2]

    cost.correction_ops += h * m * n_cached * d

    rows_per_block = max(1, _EXACT_BLOCK_ELEMENTS // max(1, n_cached * d))

    def correct(cached_scores: np.ndarray) -> None:
        for head in range(h):
            for start, stop in _row_blocks(m, rows_per_block):
                cached_scores[head, start:stop, :] -= exact_correction(
                    queries[head, start:stop, None, :],
                    channel_deltas[head, None, :, :],
                    d,
                )

    return correct


def _per_channel_corrector(
    queries: np.ndarray,
    key_block: TokenBlock,
    cost: CostCounters,
):
    h, m, d = queries.shape

    if isinstance(key_block, FullPrecisionTokenBlock):
        return None

    if key_block.spec.granularity != Granularity.PER_CHANNEL:
        raise QuantizationError(
            'per-channel-taylor correction requires a per-channel quantized cache',
        )

    chunk_lengths = key_block.chunk_lengths
    cost.correction_ops += h * m * d * len(chunk_lengths)

    # (H, n_chunks, d), one row of channel step sizes per written chunk
    chunk_deltas = key_block.noise_deltas()
    corrections = [
        per_channel_correction(
            queries,
            chunk_deltas[..., chunk_index : chunk_index + 1, :],
            d,
            CorrectionForm.TAYLOR,
        )
        for chunk_index in range(len(chunk_lengths))
    ]

    def correct(cached_scores: np.ndarray) -> None:
        start = 0

        for chunk_length, correction in zip(chunk_lengths, corrections, strict=True):
            stop = start + chunk_length
            cached_scores[..., start:stop] -= np.asarray(correction)[..., None]
            start = stop

    return correct


_CORRECTORS = {
    CorrectionMode.TAYLOR: _taylor_corrector,
    CorrectionMode.EXACT: _exact_corrector,
    CorrectionMode.PER_CHANNEL_TAYLOR: _per_channel_corrector,
}


def _check_workload(
    workload: AttentionWorkload,
) -> None:
    queries = workload.queries
    cache = workload.cache

    if queries.ndim != 3 or queries.shape[1] < 1:
        raise ShapeMismatchError(
            f'Queries must be (heads, M >= 1, d), got {queries.shape}',
        )

    if workload.current_keys.shape[-2] < 1:
        raise ShapeMismatchError('Current block must hold at least one token')

    if workload.current_keys.shape[-1] != workload.d:
        raise ShapeMismatchError(
            f'Current keys dim {workload.current_keys.shape[-1]} != {workload.d}',
        )

    if workload.current_keys.shape[:-1] != workload.current_values.shape[:-1]:
        raise ShapeMismatchError('Current keys and values disagree on tokens')

    if cache.keys is not None:
        if cache.keys.d != workload.d:
            raise ShapeMismatchError(
                f'Cached key dim {cache.keys.d} != query dim {workload.d}',
            )

        if cache.values is None or cache.values.d != workload.d_v:
            raise ShapeMismatchError('Cached values missing or wrong dimension')


def attend(
    workload: AttentionWorkload,
    mode: CorrectionMode = CorrectionMode.NONE,
    rotation: HadamardRotation | None = None,
    emit_weights: bool = False,
) -> AttentionResult:
    """
    Attention over [cached; current] with the cached-score correction of `mode`.
    Queries and current keys are rotated here with `rotation`, which must be the
    rotation the cache was written with.
    """
    _check_workload(workload)

    cache = workload.cache
    rotation_seed = None if rotation is None else rotation.seed

    if cache.keys is not None and cache.rotation_seed != rotation_seed:
        raise RotationError(
            f'Cache rotation seed {cache.rotation_seed} != query rotation seed'
            f' {rotation_seed}',
        )

    queries = np.asarray(workload.queries, dtype=np.float64)
    current_keys = np.asarray(workload.current_keys, dtype=np.float64)
    current_values = np.asarray(workload.current_values, dtype=np.float64)

    if rotation is not None:
        queries = rotate(queries, rotation)
        current_keys = rotate(current_keys, rotation)

    heads, m, d = queries.shape
    n_cached = cache.n_tokens

    if n_cached > 0:
        keys = np.concatenate([cache.keys.dequantize(), current_keys], axis=-2)
        values = np.concatenate([cache.values.dequantize(), current_values], axis=-2)
    else:
        keys = current_keys
        values = current_values

    cost = CostCounters(
        score_ops=heads * m * keys.shape[-2] * d,
    )

    corrector = None

    if n_cached > 0 and mode != CorrectionMode.NONE:
        corrector = _CORRECTORS[mode](queries, cache.keys, cost)

    output, weights, scores = _softmax_attention(
        queries,
        keys,
        values,
        n_cached=n_cached,
        correct_scores=corrector,
    )

    return AttentionResult(
        output=output,
        n_cached=n_cached,
        cost=cost,
        weights=weights if emit_weights else None,
        scores=scores if emit_weights else None,
    )
