"""
JKVT binary tensor format.

Layout (little-endian):
    magic "JKVT" | version u8 | dtype u8 | ndim u8 | reserved u8
    | dims: ndim x u64 | payload: row-major float32
"""

import logging
import math
import struct

import numpy as np

from constants.report import (
    TensorFileConstants,
)
from enumerations import (
    TensorDtype,
)
from utils.atomic_io import (
    atomic_write_bytes,
)

logger = logging.getLogger(__name__)


class TensorFormatError(ValueError):
    """Raised when bytes do not form a valid JKVT tensor."""


_HEADER_SIZE = struct.calcsize(TensorFileConstants.HeaderFormat)
_DIM_SIZE = struct.calcsize(TensorFileConstants.DimFormat)


def serialize_tensor(
    array: np.ndarray,
) -> bytes:
    """
    Encodes an array as JKVT bytes (values are cast to float32).
    """
    array = np.ascontiguousarray(
        array,
        dtype='<f4',
    )

    if array.ndim > 255:
        raise TensorFormatError(
            f'Too many dimensions: {array.ndim}',
        )

    header = struct.pack(
        TensorFileConstants.HeaderFormat,
        TensorFileConstants.Magic,
        TensorFileConstants.Version,
        TensorDtype.FLOAT32,
        array.ndim,
        0,
    )

    dims = b''.join(
        struct.pack(
            TensorFileConstants.DimFormat,
            dim,
        )
        for dim in array.shape
    )

    return header + dims + array.tobytes(order='C')


def deserialize_tensor(
    data: bytes,
) -> np.ndarray:
    """
    Decodes JKVT bytes; rejects unknown versions, dtypes and bad payload lengths.
    """
    if len(data) < _HEADER_SIZE:
        raise TensorFormatError(
            f'Truncated header: {len(data)}B',
        )

    magic, version, dtype, ndim, _reserved = struct.unpack_from(
        TensorFileConstants.HeaderFormat,
        data,
    )

    if magic != TensorFileConstants.Magic:
        raise TensorFormatError(
            f'Bad magic: {magic!r}',
        )

    if version != TensorFileConstants.Version:
        raise TensorFormatError(
            f'Unsupported version: {version}',
        )

    if dtype != TensorDtype.FLOAT32:
        raise TensorFormatError(
            f'Unsupported dtype: {dtype}',
        )

    dims_end = _HEADER_SIZE + ndim * _DIM_SIZE

    if len(data) < dims_end:
        raise TensorFormatError(
            'Truncated dimension table',
        )

    shape = tuple(
        struct.unpack_from(
            TensorFileConstants.DimFormat,
            data,
            _HEADER_SIZE + index * _DIM_SIZE,
        )[0]
        for index in range(ndim)
    )

    expected_payload_size = math.prod(shape) * TensorFileConstants.ItemSize
    payload = data[dims_end:]

    if len(payload) != expected_payload_size:
        raise TensorFormatError(
            f'Payload size {len(payload)}B does not match dims {shape}'
            f' ({expected_payload_size}B expected)',
        )

    return (
        np.frombuffer(
            payload,
            dtype='<f4',
        )
        .reshape(shape)
        .astype(np.float32)
    )


def write_tensor(
    path: str,
    array: np.ndarray,
) -> None:
    data = serialize_tensor(array)

    atomic_write_bytes(
        path=path,
        content=data,
    )

    logger.info(
        'Wrote tensor %s shape=%s (%dB)',
        path,
        tuple(array.shape),
        len(data),
    )


def read_tensor(
    path: str,
) -> np.ndarray:
    with open(path, 'rb') as tensor_file:
        return deserialize_tensor(
            tensor_file.read(),
        )
