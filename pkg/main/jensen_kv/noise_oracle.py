"""
Monte Carlo ground truth for the uniform quantization-noise model and for the
score correction.

Every estimator streams its draws in chunks. Chunk k draws from an independent
PCG64 stream spawned from `numpy.random.SeedSequence(seed)`, and chunk results
are combined in chunk order, so estimates depend only on (inputs, seed, chunk size).
"""

import logging
import math
from collections.abc import Iterator
from dataclasses import (
    dataclass,
    field,
)
from typing import Any

import numpy as np
from chrono import (
    Timer,
)
from scipy import (
    stats,
)

from enumerations import (
    CorrectionMode,
    Granularity,
)
from main.jensen_kv.bias_correction import (
    exact_correction,
    score_noise_variance,
    taylor_correction,
)
from main.jensen_kv.errors import (
    QuantizationError,
    ShapeMismatchError,
)
from main.jensen_kv.quant_core import (
    quantize_block,
)
from main.jensen_kv.rotation import (
    HadamardRotation,
    build_rotation,
    inverse_rotate,
    rotate,
)
from main.jensen_kv.schemas import (
    QuantSpec,
)
from main.jensen_kv.workload import (
    SyntheticWorkload,
)
from settings import settings

logger = logging.getLogger(__name__)

# Upper bound on (draws x keys x channels) elements held at once
_PARTITION_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True, slots=True)
class NoiseModel:
    """eps_c ~ U(-delta_c / 2, +delta_c / 2), independent across channels."""

    deltas: np.ndarray

    @property
    def d(self) -> int:
        return self.deltas.shape[-1]

    @property
    def channel_variance(self) -> np.ndarray:
        return np.square(self.deltas) / 12.0

    def sample(
        self,
        rng: np.random.Generator,
        n: int,
    ) -> np.ndarray:
        return (rng.random((n, *self.deltas.shape)) - 0.5) * self.deltas


@dataclass(frozen=True, slots=True)
class McEstimate:
    mean: float
    std_error: float
    n_samples: int
    seed: int

    def z_score(
        self,
        target: float,
    ) -> float:
        if self.std_error == 0.0:
            return 0.0 if self.mean == target else math.inf

        return (self.mean - target) / self.std_error


@dataclass(slots=True)
class _RunningMoments:
    """Chan et al. pairwise combination of chunk means and squared deviations."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(
        self,
        values: np.ndarray,
    ) -> None:
        count = values.size

        if count == 0:
            return

        chunk_mean = float(values.mean())
        chunk_m2 = float(np.sum(np.square(values - chunk_mean)))
        total = self.n + count
        delta = chunk_mean - self.mean

        self.mean += delta * count / total
        self.m2 += chunk_m2 + delta * delta * self.n * count / total
        self.n = total

    def estimate(
        self,
        seed: int,
    ) -> McEstimate:
        if self.n < 2:
            std_error = 0.0
        else:
            std_error = math.sqrt(self.m2 / (self.n - 1)) / math.sqrt(self.n)

        return McEstimate(
            mean=self.mean,
            std_error=std_error,
            n_samples=self.n,
            seed=seed,
        )


def _chunked_generators(
    n: int,
    seed: int,
    chunk_size: int,
) -> Iterator[tuple[np.random.Generator, int]]:
    if n < 1:
        raise ValueError('Number of samples must be >= 1')

    chunk_size = max(1, chunk_size)
    n_chunks = math.ceil(n / chunk_size)
    children = np.random.SeedSequence(seed).spawn(n_chunks)

    for index, child in enumerate(children):
        count = min(chunk_size, n - index * chunk_size)
        yield np.random.Generator(np.random.PCG64(child)), count


def _noise_projection(
    q: np.ndarray,
    model: NoiseModel,
) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)

    if q.shape != model.deltas.shape:
        raise ShapeMismatchError(
            f'Query shape {q.shape} != step size shape {model.deltas.shape}',
        )

    return q * model.deltas / np.sqrt(model.d)


def _score_noise_chunks(
    q: np.ndarray,
    model: NoiseModel,
    n: int,
    seed: int,
    chunk_size: int | None,
) -> Iterator[np.ndarray]:
    # delta = sum_c q_c eps_c / sqrt(d) with eps_c = delta_c (u_c - 1/2)
    weights = _noise_projection(q, model)

    for rng, count in _chunked_generators(
        n,
        seed,
        chunk_size or settings.JENSENKV_MC_CHUNK_SIZE,
    ):
        yield (rng.random((count, model.d)) - 0.5) @ weights


def sample_score_noise(
    q: np.ndarray,
    model: NoiseModel,
    n: int,
    seed: int,
    chunk_size: int | None = None,
) -> np.ndarray:
    """n draws of delta = q^T eps / sqrt(d)."""
    return np.concatenate(
        list(_score_noise_chunks(q, model, n, seed, chunk_size)),
    )


def mc_expected_exp(
    q: np.ndarray,
    model: NoiseModel,
    n: int,
    seed: int,
    chunk_size: int | None = None,
) -> McEstimate:
    """Monte Carlo estimate of E[exp(delta)]."""
    moments = _RunningMoments()

    for noise in _score_noise_chunks(q, model, n, seed, chunk_size):
        moments.update(np.exp(noise))

    return moments.estimate(seed)


@dataclass(frozen=True, slots=True)
class PartitionBias:
    """Mean partition-sum ratios Z_hat_S / Z_S and Z_tilde_S / Z_S over draws."""

    uncorrected: McEstimate
    corrected: McEstimate
    mode: CorrectionMode

    def to_dict(self) -> dict[str, Any]:
        return {
            'mode': str(self.mode),
            'uncorrected_ratio': self.uncorrected.mean,
            'uncorrected_std_error': self.uncorrected.std_error,
            'corrected_ratio': self.corrected.mean,
            'corrected_std_error': self.corrected.std_error,
            'n_samples': self.uncorrected.n_samples,
        }


def _key_corrections(
    q: np.ndarray,
    channel_deltas: np.ndarray,
    d: int,
    mode: CorrectionMode,
    spec: QuantSpec | None,
) -> np.ndarray:
    if mode == CorrectionMode.NONE:
        return np.zeros(channel_deltas.shape[0])

    if mode == CorrectionMode.EXACT:
        return exact_correction(q[None, :], channel_deltas, d)

    if mode == CorrectionMode.PER_CHANNEL_TAYLOR and (
        spec is not None and spec.granularity != Granularity.PER_CHANNEL
    ):
        raise QuantizationError(
            'per-channel-taylor correction requires per-channel quantization',
        )

    return taylor_correction(q[None, :], channel_deltas, d)


def mc_partition_bias(
    workload: SyntheticWorkload,
    spec: QuantSpec | None,
    correction_mode: CorrectionMode,
    n_noise_draws: int,
    seed: int,
    query_limit: int | None = None,
) -> PartitionBias:
    """
    Samples model noise on the cached keys' step sizes and estimates the mean
    cached partition-sum ratio with and without the correction, averaged over
    heads and (up to `query_limit`) queries. `spec=None` means an unquantized cache.
    """
    if workload.n_cached == 0:
        raise ShapeMismatchError('Partition bias needs a nonempty cache')

    d = workload.config.head_dim
    queries = workload.queries
    keys = workload.cached_keys

    if spec is not None and spec.rotation:
        rotation = build_rotation(d, spec.seed)
        queries = rotate(queries, rotation)
        keys = rotate(keys, rotation)

    if spec is None:
        channel_deltas = np.zeros(keys.shape)
    else:
        channel_deltas = quantize_block(keys, spec).channel_deltas()

    if query_limit is not None:
        queries = queries[:, :query_limit, :]

    n_cached = workload.n_cached
    draws_per_block = max(1, _PARTITION_BLOCK_ELEMENTS // (n_cached * d))

    uncorrected = _RunningMoments()
    corrected = _RunningMoments()

    with Timer() as timer:
        # Each (head, query) pair owns a stream spawned from the master seed
        pair_seeds = np.random.SeedSequence(seed).spawn(
            queries.shape[0] * queries.shape[1],
        )
        pair_index = 0

        for head in range(queries.shape[0]):
            head_deltas = channel_deltas[head]

            for query in queries[head]:
                scores = keys[head] @ query / np.sqrt(d)
                shifted = scores - scores.max()
                reference_sum = np.exp(shifted).sum()
                corrections = _key_corrections(
                    query,
                    head_deltas,
                    d,
                    correction_mode,
                    spec,
                )
                weights = query * head_deltas / np.sqrt(d)
                pair_seed = pair_seeds[pair_index]
                pair_index += 1

                children = pair_seed.spawn(math.ceil(n_noise_draws / draws_per_block))

                for block_index, child in enumerate(children):
                    count = min(
                        draws_per_block,
                        n_noise_draws - block_index * draws_per_block,
                    )
                    rng = np.random.Generator(np.random.PCG64(child))
                    unit = rng.random((count, n_cached, d)) - 0.5
                    noise = np.einsum('knc,nc->kn', unit, weights)
                    noisy = np.exp(shifted[None, :] + noise)

                    uncorrected.update(noisy.sum(axis=1) / reference_sum)
                    corrected.update(
                        (noisy * np.exp(-corrections)[None, :]).sum(axis=1)
                        / reference_sum,
                    )

    logger.info(
        'Partition bias (%s): uncorrected=%.5f corrected=%.5f by %.3fs',
        correction_mode,
        uncorrected.mean,
        corrected.mean,
        timer.elapsed,
    )

    return PartitionBias(
        uncorrected=uncorrected.estimate(seed),
        corrected=corrected.estimate(seed),
        mode=correction_mode,
    )


@dataclass(frozen=True, slots=True)
class SkewDemo:
    """Samples of exp(s + delta), exp(s + delta - b) and the reference exp(s)."""

    reference: float
    uncorrected_mean: float
    corrected_mean: float
    uncorrected_median: float
    correction: float
    histogram_edges: list[float] = field(default_factory=list)
    uncorrected_counts: list[int] = field(default_factory=list)
    corrected_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            'reference': self.reference,
            'uncorrected_mean': self.uncorrected_mean,
            'corrected_mean': self.corrected_mean,
            'uncorrected_median': self.uncorrected_median,
            'correction': self.correction,
            'histogram': {
                'edges': self.histogram_edges,
                'uncorrected': self.uncorrected_counts,
                'corrected': self.corrected_counts,
            },
        }


def skew_demo(
    s: float,
    delta: float,
    n: int,
    seed: int,
    bins: int | None = None,
) -> SkewDemo:
    """
    Scalar case d = 1, q = 1: delta ~ U(-step/2, step/2), alpha = step / 2.
    """
    model = NoiseModel(deltas=np.array([delta], dtype=np.float64))
    q = np.ones(1)
    noise = sample_score_noise(q, model, n, seed)
    correction = exact_correction(q, model.deltas, 1)

    uncorrected = np.exp(s + noise)
    corrected = np.exp(s + noise - correction)

    low = float(min(uncorrected.min(), corrected.min()))
    high = float(max(uncorrected.max(), corrected.max()))

    if low == high:
        low, high = low - 0.5, high + 0.5

    bins = bins or settings.JENSENKV_HISTOGRAM_BINS
    uncorrected_counts, edges = np.histogram(uncorrected, bins=bins, range=(low, high))
    corrected_counts, _ = np.histogram(corrected, bins=bins, range=(low, high))

    return SkewDemo(
        reference=math.exp(s),
        uncorrected_mean=float(uncorrected.mean()),
        corrected_mean=float(corrected.mean()),
        uncorrected_median=float(np.median(uncorrected)),
        correction=float(correction),
        histogram_edges=edges.tolist(),
        uncorrected_counts=uncorrected_counts.tolist(),
        corrected_counts=corrected_counts.tolist(),
    )


def empirical_residual_check(
    spec: QuantSpec,
    n_tokens: int,
    d: int,
    seed: int,
    distribution: str = 'uniform',
) -> dict[str, float]:
    """
    Rounding residuals of real quantize/dequantize roundtrips, normalized by their
    step size; the uniform-noise model predicts mean 0, variance 1/12 and a small
    KS distance to U(-1/2, 1/2).
    """
    rng = np.random.default_rng(seed)

    if distribution == 'gaussian':
        x = rng.standard_normal((n_tokens, d))
    elif distribution == 'uniform':
        x = rng.uniform(-1.0, 1.0, size=(n_tokens, d))
    else:
        raise ValueError(f'Unsupported distribution: {distribution}')

    block = quantize_block(x, spec)
    deltas = block.channel_deltas()
    rounded = deltas > 0.0
    residual = (block.dequantize() - x)[rounded] / deltas[rounded]

    ks = stats.kstest(residual, stats.uniform(loc=-0.5, scale=1.0).cdf)

    return {
        'mean': float(residual.mean()),
        'variance_ratio': float(residual.var() * 12.0),
        'ks_statistic': float(ks.statistic),
        'max_abs': float(np.abs(residual).max()),
        'n_samples': int(residual.size),
    }


def rotated_correction_consistency(
    q: np.ndarray,
    keys: np.ndarray,
    spec: QuantSpec,
    rotation: HadamardRotation,
    n: int,
    seed: int,
    chunk_size: int | None = None,
) -> McEstimate:
    """
    Noise is drawn in the rotated space where the keys were quantized and mapped
    back with H^T, so the score noise is measured in the unrotated space. Returns
    the estimate of mean_i E[exp(delta_i - b_i)] with b_i computed on (Hq, deltas_i);
    it is 1 when the rotated-space correction is unbiased.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    d = q.shape[-1]

    channel_deltas = quantize_block(rotate(keys, rotation), spec).channel_deltas()
    corrections = exact_correction(rotate(q, rotation)[None, :], channel_deltas, d)
    model = NoiseModel(deltas=channel_deltas)
    moments = _RunningMoments()

    for rng, count in _chunked_generators(
        n,
        seed,
        chunk_size or settings.JENSENKV_MC_CHUNK_SIZE,
    ):
        rotated_noise = model.sample(rng, count)
        noise = inverse_rotate(rotated_noise, rotation) @ q / np.sqrt(d)
        moments.update(np.exp(noise - corrections[None, :]).mean(axis=1))

    return moments.estimate(seed)


def closed_form_agreement_suite(
    n_configs: int,
    n_samples: int,
    seed: int,
    dims: tuple[int, ...] = (1, 8, 64, 128),
) -> list[dict[str, float]]:
    """
    Random (q, delta) configurations cycling through `dims`; each row compares
    the MC estimate of E[exp(delta)] with prod_c sinh(alpha_c) / alpha_c.
    """
    config_rng = np.random.default_rng(seed)
    rows = []

    for index in range(n_configs):
        d = dims[index % len(dims)]
        q = config_rng.standard_normal(d) * 1.5
        deltas = config_rng.uniform(0.25, 2.5, size=d)
        model = NoiseModel(deltas=deltas)

        estimate = mc_expected_exp(
            q,
            model,
            n_samples,
            seed=seed + index + 1,
        )
        closed_form = float(np.exp(exact_correction(q, deltas, d)))

        rows.append(
            {
                'd': d,
                'mc_mean': estimate.mean,
                'std_error': estimate.std_error,
                'closed_form': closed_form,
                'z_score': estimate.z_score(closed_form),
                'sigma2': score_noise_variance(q, deltas, d),
                'n_samples': n_samples,
            },
        )

    return rows
