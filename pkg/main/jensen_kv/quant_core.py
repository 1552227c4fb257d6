"""
Asymmetric round-to-nearest integer quantization of token vectors.

Blocks are laid out as (..., n_tokens, d). Per-token-grouped granularity keeps one
(delta, zero-point) pair per (token, group of g channels); per-channel granularity
keeps one pair per channel shared by every token of the block.
"""

import logging
import math
from dataclasses import (
    dataclass,
    field,
)
from typing import (
    Protocol,
)

import numpy as np

from constants.quantization import (
    QuantizationConstants,
)
from enumerations import (
    Granularity,
    ScaleFormat,
    ZeroPointFormat,
)
from main.jensen_kv.errors import (
    QuantizationError,
    ShapeMismatchError,
)
from main.jensen_kv.schemas import (
    QuantSpec,
)

logger = logging.getLogger(__name__)

# Smallest positive E4M3 subnormal, 2^-9
_FP8_E4M3_MIN_SUBNORMAL = 2.0 ** (
    QuantizationConstants.Fp8E4M3MinNormalExponent
    - QuantizationConstants.Fp8E4M3MantissaBits
)


@dataclass(frozen=True, slots=True)
class GroupParams:
    delta: float
    zero_point: float


def emulate_fp8_e4m3(
    x: float | np.ndarray,
) -> float | np.ndarray:
    """
    Rounds to the nearest FP8 E4M3 value (ties to even), saturating at +-448.
    """
    values = np.asarray(x, dtype=np.float64)

    if not np.all(np.isfinite(values)):
        raise QuantizationError('FP8 emulation requires finite input')

    magnitude = np.abs(values)

    # frexp: magnitude = mantissa * 2**exponent, mantissa in [0.5, 1)
    _, exponent = np.frexp(magnitude)
    unbiased_exponent = np.maximum(
        exponent - 1,
        QuantizationConstants.Fp8E4M3MinNormalExponent,
    )
    quantum = np.ldexp(
        1.0,
        unbiased_exponent - QuantizationConstants.Fp8E4M3MantissaBits,
    )

    rounded = np.minimum(
        np.rint(magnitude / quantum) * quantum,
        QuantizationConstants.Fp8E4M3MaxMagnitude,
    )
    result = np.copysign(rounded, values)

    if np.ndim(x) == 0:
        return float(result)

    return result


def emulate_bf16(
    x: float | np.ndarray,
) -> float | np.ndarray:
    """
    Rounds to the nearest bfloat16 value (ties to even) via the float32 bit pattern.
    """
    values = np.asarray(x, dtype=np.float64)

    if not np.all(np.isfinite(values)):
        raise QuantizationError('BF16 emulation requires finite input')

    bits = np.atleast_1d(values.astype(np.float32)).view(np.uint32)
    rounding_bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    truncated = (bits + rounding_bias) & np.uint32(0xFFFF0000)
    result = truncated.view(np.float32).astype(np.float64).reshape(values.shape)

    if np.ndim(x) == 0:
        return float(result)

    return result


def _store_scale(
    delta: np.ndarray,
    scale_format: ScaleFormat,
) -> np.ndarray:
    if scale_format == ScaleFormat.FULL_PRECISION:
        return delta

    stored = emulate_fp8_e4m3(delta)

    # A nonzero step must never underflow to zero in storage
    return np.where(
        (delta > 0.0) & (stored == 0.0),
        _FP8_E4M3_MIN_SUBNORMAL,
        stored,
    )


def _store_zero_point(
    zero_point: np.ndarray,
    zeropoint_format: ZeroPointFormat,
) -> np.ndarray:
    if zeropoint_format == ZeroPointFormat.FULL_PRECISION:
        return zero_point

    return emulate_bf16(zero_point)


def _compute_params(
    x: np.ndarray,
    axis: int,
    bits: int,
    scale_format: ScaleFormat,
    zeropoint_format: ZeroPointFormat,
    integer_zero_point: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(x)):
        raise QuantizationError('Quantization input must be finite')

    max_code = (1 << bits) - 1

    lo = np.minimum(x.min(axis=axis, keepdims=True), 0.0)
    hi = np.maximum(x.max(axis=axis, keepdims=True), 0.0)

    all_zero = hi == lo
    ideal_delta = np.where(
        all_zero,
        1.0,
        (hi - lo) / max_code,
    )

    delta = _store_scale(
        ideal_delta,
        scale_format,
    )
    delta = np.where(
        all_zero,
        1.0,
        delta,
    )

    zero_point = np.where(
        all_zero,
        0.0,
        -lo / delta,
    )

    if integer_zero_point:
        zero_point = np.clip(
            np.rint(zero_point),
            0,
            max_code,
        )

    zero_point = _store_zero_point(
        zero_point,
        zeropoint_format,
    )

    return delta, zero_point


def compute_group_params(
    x: np.ndarray,
    bits: int,
    scale_format: ScaleFormat = ScaleFormat.FULL_PRECISION,
    zeropoint_format: ZeroPointFormat = ZeroPointFormat.FULL_PRECISION,
    integer_zero_point: bool = False,
) -> GroupParams:
    """
    Step size and zero-point covering the zero-inclusive range of one group.
    """
    values = np.asarray(x, dtype=np.float64).reshape(-1)

    if values.size == 0:
        raise QuantizationError('Group must contain at least one element')

    delta, zero_point = _compute_params(
        values,
        axis=0,
        bits=bits,
        scale_format=scale_format,
        zeropoint_format=zeropoint_format,
        integer_zero_point=integer_zero_point,
    )

    return GroupParams(
        delta=float(delta[0]),
        zero_point=float(zero_point[0]),
    )


def quantize(
    x: np.ndarray | float,
    delta: np.ndarray | float,
    zero_point: np.ndarray | float,
    bits: int,
) -> np.ndarray:
    """
    x_q = clamp(round_half_even(x / delta + z), 0, 2^B - 1); parameters broadcast.
    """
    values = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    zero_point = np.asarray(zero_point, dtype=np.float64)

    zero_step = np.broadcast_to(delta == 0.0, values.shape)

    if np.any(zero_step & (values != 0.0)):
        raise QuantizationError('Zero step size with nonzero input')

    safe_delta = np.where(delta == 0.0, 1.0, delta)

    codes = np.clip(
        np.rint(values / safe_delta + zero_point),
        0,
        (1 << bits) - 1,
    )

    return codes.astype(np.uint8 if bits <= 8 else np.uint16)


def dequantize(
    codes: np.ndarray,
    delta: np.ndarray | float,
    zero_point: np.ndarray | float,
) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) - zero_point) * delta


def pack_codes(
    codes: np.ndarray,
    bits: int,
) -> bytes:
    """
    Little-endian within a byte: code i occupies bits [B * (i mod (8 / B)), ...).
    """
    if bits not in QuantizationConstants.PackableBits:
        raise QuantizationError(f'Cannot pack {bits}-bit codes')

    flat = np.asarray(codes).reshape(-1).astype(np.int64)

    if flat.size and (flat.min() < 0 or flat.max() > (1 << bits) - 1):
        raise QuantizationError(f'Code out of range for {bits} bits')

    codes_per_byte = 8 // bits
    padded = np.zeros(
        math.ceil(flat.size / codes_per_byte) * codes_per_byte,
        dtype=np.uint8,
    )
    padded[: flat.size] = flat

    shifts = np.arange(codes_per_byte, dtype=np.uint8) * bits
    packed = np.bitwise_or.reduce(
        padded.reshape(-1, codes_per_byte) << shifts,
        axis=1,
    ).astype(np.uint8)

    return packed.tobytes()


def unpack_codes(
    data: bytes,
    n: int,
    bits: int,
) -> np.ndarray:
    if bits not in QuantizationConstants.PackableBits:
        raise QuantizationError(f'Cannot unpack {bits}-bit codes')

    codes_per_byte = 8 // bits

    if len(data) * codes_per_byte < n:
        raise QuantizationError(
            f'{len(data)}B cannot hold {n} codes of {bits} bits',
        )

    packed = np.frombuffer(data, dtype=np.uint8)
    shifts = np.arange(codes_per_byte, dtype=np.uint8) * bits
    mask = np.uint8((1 << bits) - 1)

    unpacked = (packed[:, None] >> shifts) & mask

    return unpacked.reshape(-1)[:n].copy()


def effective_bitwidth(
    bits: int,
    group_size: int,
) -> float:
    """
    Payload bits plus amortized FP8 scale and BF16 zero-point per group.
    """
    if group_size < 1:
        raise QuantizationError('group_size must be >= 1')

    return bits + QuantizationConstants.MetadataBitsPerGroup / group_size


class TokenBlock(Protocol):
    """Anything the attention engine can read cached tokens from."""

    n_tokens: int
    d: int

    @property
    def group_width(self) -> int: ...

    def dequantize(self) -> np.ndarray: ...

    def group_deltas(self) -> np.ndarray: ...


@dataclass(frozen=True, slots=True)
class QuantizedTokenBlock:
    codes: bytes
    deltas: np.ndarray
    zero_points: np.ndarray
    shape: tuple[int, ...]
    spec: QuantSpec
    # One entry per chunk write; per-channel params are shared within a chunk
    chunk_lengths: tuple[int, ...] = field(default=())

    @property
    def n_tokens(self) -> int:
        return self.shape[-2]

    @property
    def d(self) -> int:
        return self.shape[-1]

    @property
    def g(self) -> int:
        return self.spec.group_size

    @property
    def group_width(self) -> int:
        """Channels sharing one step size along a token vector."""
        if self.spec.granularity == Granularity.PER_CHANNEL:
            return 1

        return self.spec.group_size

    @property
    def payload_bits(self) -> int:
        """Nominal B bits per code; 3-bit codes are held one per byte in `codes`."""
        return math.prod(self.shape) * self.spec.bits

    @property
    def stored_bits(self) -> int:
        metadata_bits = self.deltas.size * QuantizationConstants.MetadataBitsPerGroup

        return self.payload_bits + metadata_bits

    def unpack(self) -> np.ndarray:
        n = math.prod(self.shape)

        if self.spec.bits in QuantizationConstants.PackableBits:
            flat = unpack_codes(self.codes, n, self.spec.bits)
        else:
            # 3-bit codes are kept one per byte
            flat = np.frombuffer(self.codes, dtype=np.uint8)[:n]

        return flat.reshape(self.shape)

    def _expanded_params(self) -> tuple[np.ndarray, np.ndarray]:
        if self.spec.granularity == Granularity.PER_CHANNEL:
            repeats = np.asarray(self.chunk_lengths or (self.n_tokens,))

            return (
                np.repeat(self.deltas, repeats, axis=-2),
                np.repeat(self.zero_points, repeats, axis=-2),
            )

        return (
            np.repeat(self.deltas, self.g, axis=-1),
            np.repeat(self.zero_points, self.g, axis=-1),
        )

    def dequantize(self) -> np.ndarray:
        deltas, zero_points = self._expanded_params()

        return dequantize(
            self.unpack(),
            deltas,
            zero_points,
        )

    def _zero_groups(self) -> np.ndarray:
        """
        Mask over `deltas` of groups that held only zeros. Those are the only
        groups stored with zero-point 0 and every code 0.
        """
        codes = self.unpack()

        if self.spec.granularity == Granularity.PER_CHANNEL:
            lengths = self.chunk_lengths or (self.n_tokens,)
            chunks = np.split(codes, np.cumsum(lengths)[:-1], axis=-2)
            nonzero = np.stack(
                [np.any(chunk != 0, axis=-2) for chunk in chunks],
                axis=-2,
            )
        else:
            grouped = codes.reshape(*self.deltas.shape, self.g)
            nonzero = np.any(grouped != 0, axis=-1)

        return ~nonzero & (self.zero_points == 0.0)

    def noise_deltas(self) -> np.ndarray:
        """`deltas` with 0 for all-zero groups, which dequantize exactly."""
        return np.where(self._zero_groups(), 0.0, self.deltas)

    def group_deltas(self) -> np.ndarray:
        """
        Rounding step size per (token, group) with groups of width `group_width`.
        """
        deltas = self.noise_deltas()

        if self.spec.granularity == Granularity.PER_CHANNEL:
            repeats = np.asarray(self.chunk_lengths or (self.n_tokens,))

            return np.repeat(deltas, repeats, axis=-2)

        return deltas

    def channel_deltas(self) -> np.ndarray:
        """Step size per (token, channel)."""
        return np.repeat(
            self.group_deltas(),
            self.group_width,
            axis=-1,
        )


@dataclass(frozen=True, slots=True)
class FullPrecisionTokenBlock:
    """Unquantized cache block; every step size is zero."""

    values: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.values.shape[-2]

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def group_width(self) -> int:
        return self.d

    def dequantize(self) -> np.ndarray:
        return self.values

    def group_deltas(self) -> np.ndarray:
        return np.zeros(self.values.shape[:-1] + (1,))

    def channel_deltas(self) -> np.ndarray:
        return np.zeros(self.values.shape)


def _encode_codes(
    codes: np.ndarray,
    bits: int,
) -> bytes:
    if bits in QuantizationConstants.PackableBits:
        return pack_codes(codes, bits)

    return codes.astype(np.uint8).tobytes()


def quantize_block(
    x: np.ndarray,
    spec: QuantSpec,
) -> QuantizedTokenBlock:
    """
    Quantizes a (..., n_tokens, d) block according to `spec`.
    """
    values = np.asarray(x, dtype=np.float64)

    if values.ndim < 2:
        raise ShapeMismatchError('Token block must be at least 2-D (n_tokens, d)')

    *lead, n_tokens, d = values.shape

    if spec.granularity == Granularity.PER_CHANNEL:
        if n_tokens == 0:
            raise QuantizationError('Per-channel block needs at least one token')

        deltas, zero_points = _compute_params(
            values,
            axis=-2,
            bits=spec.bits,
            scale_format=spec.scale_format,
            zeropoint_format=spec.zeropoint_format,
            integer_zero_point=spec.integer_zero_point,
        )
        codes = quantize(values, deltas, zero_points, spec.bits)
    else:
        try:
            spec.check_dim(d)
        except ValueError as exception:
            raise QuantizationError(str(exception)) from exception

        n_groups = d // spec.group_size
        grouped = values.reshape(*lead, n_tokens, n_groups, spec.group_size)

        if n_tokens == 0:
            deltas = np.ones((*lead, 0, n_groups))
            zero_points = np.zeros((*lead, 0, n_groups))
        else:
            deltas, zero_points = _compute_params(
                grouped,
                axis=-1,
                bits=spec.bits,
                scale_format=spec.scale_format,
                zeropoint_format=spec.zeropoint_format,
                integer_zero_point=spec.integer_zero_point,
            )

        codes = quantize(grouped, deltas, zero_points, spec.bits).reshape(
            values.shape,
        )
        deltas = deltas.reshape(*lead, n_tokens, n_groups)
        zero_points = zero_points.reshape(*lead, n_tokens, n_groups)

    return QuantizedTokenBlock(
        codes=_encode_codes(codes, spec.bits),
        deltas=deltas,
        zero_points=zero_points,
        shape=tuple(values.shape),
        spec=spec,
        chunk_lengths=(n_tokens,),
    )


def concat_blocks(
    first: QuantizedTokenBlock,
    second: QuantizedTokenBlock,
) -> QuantizedTokenBlock:
    """
    Appends `second` after `first` along the token axis.
    """
    if first.spec != second.spec:
        raise QuantizationError('Cannot concatenate blocks with different specs')

    if first.shape[:-2] != second.shape[:-2] or first.d != second.d:
        raise ShapeMismatchError(
            f'Block shapes {first.shape} and {second.shape} are incompatible',
        )

    axis = -2
    codes = np.concatenate([first.unpack(), second.unpack()], axis=axis)

    return QuantizedTokenBlock(
        codes=_encode_codes(codes, first.spec.bits),
        deltas=np.concatenate([first.deltas, second.deltas], axis=axis),
        zero_points=np.concatenate(
            [first.zero_points, second.zero_points],
            axis=axis,
        ),
        shape=tuple(codes.shape),
        spec=first.spec,
        chunk_lengths=first.chunk_lengths + second.chunk_lengths,
    )
