"""
Persistence of a KVCache as a single `.npz` archive.

Quantized blocks keep their packed code bytes, stored step sizes and zero-points,
so a reloaded cache dequantizes bit-identically.
"""

import logging

import numpy as np
import orjson

from main.jensen_kv.attention_engine import (
    KVCache,
)
from main.jensen_kv.errors import (
    QuantizationError,
)
from main.jensen_kv.quant_core import (
    FullPrecisionTokenBlock,
    QuantizedTokenBlock,
    TokenBlock,
)
from main.jensen_kv.schemas import (
    QuantSpec,
)
from utils.atomic_io import (
    atomic_write_npz,
)

logger = logging.getLogger(__name__)


def _block_arrays(
    prefix: str,
    block: TokenBlock,
) -> dict[str, np.ndarray]:
    if isinstance(block, FullPrecisionTokenBlock):
        return {
            f'{prefix}_kind': np.array('full-precision'),
            f'{prefix}_values': block.values,
        }

    return {
        f'{prefix}_kind': np.array('quantized'),
        f'{prefix}_codes': np.frombuffer(block.codes, dtype=np.uint8),
        f'{prefix}_deltas': block.deltas,
        f'{prefix}_zero_points': block.zero_points,
        f'{prefix}_shape': np.asarray(block.shape, dtype=np.int64),
        f'{prefix}_chunk_lengths': np.asarray(block.chunk_lengths, dtype=np.int64),
        f'{prefix}_spec': np.array(
            orjson.dumps(block.spec.model_dump(mode='json')).decode(),
        ),
    }


def _load_block(
    archive: np.lib.npyio.NpzFile,
    prefix: str,
) -> TokenBlock:
    kind = str(archive[f'{prefix}_kind'])

    if kind == 'full-precision':
        return FullPrecisionTokenBlock(
            values=archive[f'{prefix}_values'],
        )

    if kind != 'quantized':
        raise QuantizationError(f'Unknown cache block kind: {kind}')

    return QuantizedTokenBlock(
        codes=archive[f'{prefix}_codes'].tobytes(),
        deltas=archive[f'{prefix}_deltas'],
        zero_points=archive[f'{prefix}_zero_points'],
        shape=tuple(int(dim) for dim in archive[f'{prefix}_shape']),
        spec=QuantSpec.model_validate_json(str(archive[f'{prefix}_spec'])),
        chunk_lengths=tuple(
            int(length) for length in archive[f'{prefix}_chunk_lengths']
        ),
    )


def save_cache(
    path: str,
    cache: KVCache,
) -> None:
    if cache.keys is None or cache.values is None:
        raise QuantizationError('Cannot save an empty cache')

    has_rotation = cache.rotation_seed is not None

    atomic_write_npz(
        path,
        has_rotation=np.array(has_rotation),
        rotation_seed=np.array(cache.rotation_seed or 0, dtype=np.uint64),
        **_block_arrays('keys', cache.keys),
        **_block_arrays('values', cache.values),
    )

    logger.info(
        'Saved cache of %d tokens to %s',
        cache.n_tokens,
        path,
    )


def load_cache(
    path: str,
) -> KVCache:
    with np.load(path, allow_pickle=False) as archive:
        rotation_seed = int(archive['rotation_seed'])
        has_rotation = bool(archive['has_rotation'])

        return KVCache(
            keys=_load_block(archive, 'keys'),
            values=_load_block(archive, 'values'),
            rotation_seed=rotation_seed if has_rotation else None,
        )
