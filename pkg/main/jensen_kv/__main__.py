import argparse
import logging
import os
import sys
from typing import Any

import numpy as np
import orjson
import polars
from chrono import (
    Timer,
)
from pydantic import (
    ValidationError,
)

from constants import (
    ArtifactConstants,
    CommonConstants,
    QuantizationConstants,
    ReportConstants,
)
from enumerations import (
    CorrectionMode,
    Granularity,
    ScaleFormat,
    ZeroPointFormat,
)
from main.jensen_kv import (
    __version__,
)
from main.jensen_kv.attention_engine import (
    AttentionWorkload,
    attend,
    reference_attention,
    write_chunk_to_cache,
)
from main.jensen_kv.cache_io import (
    load_cache,
    save_cache,
)
from main.jensen_kv.diagnostics import (
    DiagnosticsReport,
    build_report,
)
from main.jensen_kv.errors import (
    AcceptanceError,
    JensenKvError,
    QuantizationError,
    ShapeMismatchError,
    TensorFormatError,
)
from main.jensen_kv.experiments import (
    compare_modes,
    curve_frame,
    multi_seed_robustness,
    parse_alphas,
    partition_bias_config,
    require_passed,
    run_acceptance_suite,
    sweep,
)
from main.jensen_kv.noise_oracle import (
    closed_form_agreement_suite,
    empirical_residual_check,
    mc_partition_bias,
    skew_demo,
)
from main.jensen_kv.quant_core import (
    QuantizedTokenBlock,
)
from main.jensen_kv.rotation import (
    build_rotation,
)
from main.jensen_kv.schemas import (
    QuantSpec,
    WorkloadConfig,
)
from main.jensen_kv.workload import (
    SyntheticWorkload,
    generate_workload,
)
from settings import settings
from utils.atomic_io import (
    atomic_write_csv,
)
from utils.json import (
    JsonUtils,
)
from utils.serialization import (
    read_tensor,
    write_tensor,
)

logger = logging.getLogger(__name__)

_MODE_CHOICES = {
    'none': CorrectionMode.NONE,
    'exact': CorrectionMode.EXACT,
    'taylor': CorrectionMode.TAYLOR,
    'per-channel': CorrectionMode.PER_CHANNEL_TAYLOR,
}


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the CLI's usage code instead of argparse's 2."""

    def error(
        self,
        message: str,
    ) -> None:
        self.print_usage(sys.stderr)
        self.exit(
            CommonConstants.ExitCodeUsageError,
            f'{self.prog}: error: {message}\n',
        )


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        '--config',
        type=str,
        default=None,
        help='Workload config JSON (defaults are used for missing fields)',
    )
    parser.add_argument(
        '--workload',
        type=str,
        default=None,
        help='Directory written by `gen` (tensors + config.json)',
    )
    parser.add_argument(
        '--seed',
        type=int,
        default=None,
        help='Workload and rotation seed (u64)',
    )
    parser.add_argument(
        '--bits',
        type=int,
        choices=QuantizationConstants.SupportedBits,
        default=None,
    )
    parser.add_argument(
        '--group-size',
        type=int,
        default=None,
    )
    parser.add_argument(
        '--granularity',
        choices=[str(granularity) for granularity in Granularity],
        default=None,
    )
    parser.add_argument(
        '--mode',
        choices=list(_MODE_CHOICES),
        default=None,
    )
    parser.add_argument(
        '--rotate',
        action='store_true',
        help='Randomized Hadamard rotation of queries and keys',
    )
    parser.add_argument(
        '--integer-zero-point',
        action='store_true',
        help='Integer zero-points, keeping exact zeros exact',
    )
    parser.add_argument(
        '--out',
        type=str,
        default=settings.JENSENKV_OUTPUT_DIR,
        help='Output directory',
    )
    parser.add_argument(
        '--emit-weights',
        action='store_true',
        help='Also write attention weights',
    )
    parser.add_argument(
        '-v',
        '--verbose',
        action='store_true',
        help='INFO logging',
    )

    return parser


def parse_arguments(
    argv: list[str] | None = None,
) -> argparse.Namespace:
    parser = _ArgumentParser(
        prog='python -m main.jensen_kv',
        description='Quantized KV-cache attention with Jensen-bias correction',
    )
    common = _common_parser()
    commands = parser.add_subparsers(
        dest='command',
        required=True,
    )

    commands.add_parser(
        'gen',
        parents=[common],
        help='Generate a synthetic workload',
    )
    quantize_parser = commands.add_parser(
        'quantize',
        parents=[common],
        help='Quantize the cached block of a workload into a cache file',
    )
    quantize_parser.add_argument(
        '--full-precision-values',
        action='store_true',
        help='Keep cached values unquantized',
    )
    attend_parser = commands.add_parser(
        'attend',
        parents=[common],
        help='Run attention in one correction mode',
    )
    attend_parser.add_argument(
        '--cache',
        type=str,
        default=None,
        help='Cache file written by `quantize`',
    )
    diagnose_parser = commands.add_parser(
        'diagnose',
        parents=[common],
        help='Compare runs against the full-precision reference',
    )
    diagnose_parser.add_argument(
        '--run',
        action='append',
        default=[],
        help='Run directory written by `attend --emit-weights` (repeatable)',
    )
    diagnose_parser.add_argument(
        '--seeds',
        type=int,
        default=None,
        help='Repeat the uncorrected/Taylor comparison over N derived seeds',
    )
    oracle_parser = commands.add_parser(
        'oracle',
        parents=[common],
        help='Monte Carlo checks of the noise model and the correction',
    )
    oracle_parser.add_argument(
        '--check',
        action='store_true',
        help='Run the acceptance suite; exit 3 on failure',
    )
    oracle_parser.add_argument(
        '--samples',
        type=int,
        default=None,
        help=f'MC samples (default {settings.JENSENKV_MC_SAMPLES})',
    )
    oracle_parser.add_argument(
        '--partition-samples',
        type=int,
        default=None,
        help=(
            'Partition-sum draws'
            f' (default {settings.JENSENKV_MC_PARTITION_SAMPLES})'
        ),
    )
    curve_parser = commands.add_parser(
        'curve',
        parents=[common],
        help='Exact vs Taylor correction curve as CSV',
    )
    curve_parser.add_argument(
        '--alphas',
        type=str,
        default='0:5:0.1',
        help='start:stop:step, stop inclusive',
    )
    commands.add_parser(
        'sweep',
        parents=[common],
        help='Storage/quality trade-off table',
    )
    commands.add_parser(
        'version',
        help='Print the package version',
    )

    return parser.parse_args(argv)


def _base_config_payload(
    arguments: argparse.Namespace,
) -> dict[str, Any]:
    if getattr(arguments, 'workload', None):
        return JsonUtils.read(
            os.path.join(arguments.workload, ArtifactConstants.ConfigFileName),
        )

    if getattr(arguments, 'config', None):
        return JsonUtils.read(arguments.config)

    return {}


def resolve_config(
    arguments: argparse.Namespace,
) -> WorkloadConfig:
    """Config file (or workload dir config) with command-line overrides applied."""
    payload = _base_config_payload(arguments)
    spec_payload = dict(payload.get('spec', {}))

    if arguments.seed is not None:
        payload['seed'] = arguments.seed
        spec_payload['seed'] = arguments.seed

    if arguments.bits is not None:
        spec_payload['bits'] = arguments.bits

    if arguments.group_size is not None:
        spec_payload['group_size'] = arguments.group_size

    if arguments.rotate:
        spec_payload['rotation'] = True

    if arguments.integer_zero_point:
        spec_payload['integer_zero_point'] = True

    if arguments.mode is not None:
        payload['mode'] = _MODE_CHOICES[arguments.mode]

        if (
            payload['mode'] == CorrectionMode.PER_CHANNEL_TAYLOR
            and arguments.granularity is None
        ):
            spec_payload['granularity'] = Granularity.PER_CHANNEL

    if arguments.granularity is not None:
        spec_payload['granularity'] = arguments.granularity

    payload['spec'] = spec_payload

    return WorkloadConfig.model_validate(payload)


def _config_payload(
    config: WorkloadConfig,
) -> dict[str, Any]:
    return config.model_dump(mode='json')


def load_workload(
    directory: str,
    config: WorkloadConfig,
) -> SyntheticWorkload:
    queries = read_tensor(os.path.join(directory, ArtifactConstants.QueriesFileName))
    keys = read_tensor(os.path.join(directory, ArtifactConstants.KeysFileName))
    values = read_tensor(os.path.join(directory, ArtifactConstants.ValuesFileName))

    n_tokens = config.n_cached + config.n_current
    expected = {
        'queries': (config.heads, config.n_queries, config.head_dim),
        'keys': (config.heads, n_tokens, config.head_dim),
        'values': (config.heads, n_tokens, config.value_dim),
    }

    for name, array in (('queries', queries), ('keys', keys), ('values', values)):
        if array.shape != expected[name]:
            raise ShapeMismatchError(
                f'{name} shape {array.shape} does not match config {expected[name]}',
            )

    return SyntheticWorkload(
        config=config,
        queries=queries.astype(np.float64),
        keys=keys.astype(np.float64),
        values=values.astype(np.float64),
    )


def _workload_for(
    arguments: argparse.Namespace,
    config: WorkloadConfig,
) -> SyntheticWorkload:
    if arguments.workload:
        return load_workload(arguments.workload, config)

    return generate_workload(config)


def _out_path(
    arguments: argparse.Namespace,
    file_name: str,
) -> str:
    return os.path.join(arguments.out, file_name)


def run_gen(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)
    workload = generate_workload(config)

    for file_name, array in (
        (ArtifactConstants.QueriesFileName, workload.queries),
        (ArtifactConstants.KeysFileName, workload.keys),
        (ArtifactConstants.ValuesFileName, workload.values),
    ):
        write_tensor(_out_path(arguments, file_name), array)

    JsonUtils.write(
        _out_path(arguments, ArtifactConstants.ConfigFileName),
        _config_payload(config),
    )

    logger.info('Workload written to %s', arguments.out)

    return CommonConstants.ExitCodeSuccess


def run_quantize(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)
    workload = _workload_for(arguments, config)

    if workload.n_cached == 0:
        raise ShapeMismatchError('Workload has no cached tokens to quantize')

    rotation = None

    if config.spec.rotation:
        rotation = build_rotation(config.head_dim, config.spec.seed)

    with Timer() as timer:
        cache = write_chunk_to_cache(
            workload.cached_keys,
            workload.cached_values,
            config.spec,
            rotation=rotation,
            quantize_values=config.quantize_values
            and not arguments.full_precision_values,
        )

    save_cache(_out_path(arguments, ArtifactConstants.CacheFileName), cache)
    JsonUtils.write(
        _out_path(arguments, ArtifactConstants.ConfigFileName),
        _config_payload(config),
    )

    logger.info(
        'Quantized %d cached tokens (%.4f effective bits) by %.3fs',
        cache.n_tokens,
        cache.keys.stored_bits / (cache.n_tokens * config.head_dim * config.heads),
        timer.elapsed,
    )

    return CommonConstants.ExitCodeSuccess


def _attention_inputs(
    arguments: argparse.Namespace,
    config: WorkloadConfig,
    workload: SyntheticWorkload,
) -> tuple[AttentionWorkload, Any]:
    if not arguments.cache:
        return workload.to_attention_workload(spec=config.spec)

    cache = load_cache(arguments.cache)

    if cache.n_tokens != workload.n_cached:
        raise ShapeMismatchError(
            f'Cache holds {cache.n_tokens} tokens, workload expects'
            f' {workload.n_cached}',
        )

    if isinstance(cache.keys, QuantizedTokenBlock):
        cached_spec = cache.keys.spec.model_copy(
            update={'rotation': config.spec.rotation, 'seed': config.spec.seed},
        )

        if cached_spec != config.spec:
            raise QuantizationError(
                f'Cache was quantized with {cache.keys.spec}, config asks for'
                f' {config.spec}',
            )

    # Queries follow the resolved config; attend rejects a cache rotated otherwise
    rotation = None

    if config.spec.rotation:
        rotation = build_rotation(config.head_dim, config.spec.seed)

    return (
        AttentionWorkload(
            queries=workload.queries,
            cache=cache,
            current_keys=workload.current_keys,
            current_values=workload.current_values,
        ),
        rotation,
    )


def run_attend(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)
    workload = _workload_for(arguments, config)
    attention_workload, rotation = _attention_inputs(arguments, config, workload)

    with Timer() as timer:
        result = attend(
            attention_workload,
            mode=config.mode,
            rotation=rotation,
            emit_weights=arguments.emit_weights,
        )

    write_tensor(_out_path(arguments, ArtifactConstants.OutputFileName), result.output)

    if arguments.emit_weights:
        write_tensor(
            _out_path(arguments, ArtifactConstants.WeightsFileName),
            result.weights,
        )

    JsonUtils.write(
        _out_path(arguments, ArtifactConstants.ReportFileName),
        {
            'schema_version': ReportConstants.SchemaVersion,
            'config': _config_payload(config),
            'n_cached': result.n_cached,
            'cost': result.cost.to_dict(),
        },
    )

    logger.info(
        'Attention (%s) over %d cached tokens by %.3fs',
        config.mode,
        result.n_cached,
        timer.elapsed,
    )

    return CommonConstants.ExitCodeSuccess


def _histogram_frame(
    reports: dict[str, DiagnosticsReport],
) -> polars.DataFrame:
    rows = []

    for name, report in reports.items():
        summary = report.delta_p_s_summary
        edges = summary.histogram_edges

        for index, count in enumerate(summary.histogram_counts):
            rows.append(
                {
                    'run': name,
                    'bin_lower': edges[index],
                    'bin_upper': edges[index + 1],
                    'count': count,
                },
            )

    return polars.DataFrame(rows)


def _run_reports(
    arguments: argparse.Namespace,
    config: WorkloadConfig,
) -> dict[str, DiagnosticsReport]:
    workload = _workload_for(arguments, config)
    reference_output, reference_weights = reference_attention(
        workload.queries,
        workload.keys,
        workload.values,
        return_weights=True,
    )
    reports = {}

    for run_directory in arguments.run:
        run_report = JsonUtils.read(
            os.path.join(run_directory, ArtifactConstants.ReportFileName),
        )
        output = read_tensor(
            os.path.join(run_directory, ArtifactConstants.OutputFileName),
        ).astype(np.float64)
        weights = read_tensor(
            os.path.join(run_directory, ArtifactConstants.WeightsFileName),
        ).astype(np.float64)

        if weights.shape != reference_weights.shape:
            raise ShapeMismatchError(
                f'Run {run_directory} weights {weights.shape} do not match'
                f' reference {reference_weights.shape}',
            )

        # Weights went through float32 storage; renormalize rows
        weights = weights / weights.sum(axis=-1, keepdims=True)

        reports[os.path.basename(os.path.normpath(run_directory))] = build_report(
            reference_weights,
            weights,
            reference_output,
            output,
            split_index=workload.n_cached,
            config=run_report.get('config', {}),
            cost=run_report.get('cost', {}),
        )

    return reports


def run_diagnose(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)

    if arguments.seeds is not None:
        JsonUtils.write(
            _out_path(arguments, ArtifactConstants.DiagnosticsFileName),
            {
                'schema_version': ReportConstants.SchemaVersion,
                **multi_seed_robustness(config, arguments.seeds),
            },
        )

        return CommonConstants.ExitCodeSuccess

    if arguments.run:
        reports = _run_reports(arguments, config)
    else:
        modes = (CorrectionMode.NONE, CorrectionMode.TAYLOR, CorrectionMode.EXACT)

        if config.spec.granularity == Granularity.PER_CHANNEL:
            modes += (CorrectionMode.PER_CHANNEL_TAYLOR,)

        comparison = compare_modes(
            config,
            modes,
            workload=_workload_for(arguments, config),
        )
        reports = {str(mode): run.report for mode, run in comparison.runs.items()}

    JsonUtils.write(
        _out_path(arguments, ArtifactConstants.DiagnosticsFileName),
        {
            'schema_version': ReportConstants.SchemaVersion,
            'config': _config_payload(config),
            'runs': {name: report.to_dict() for name, report in reports.items()},
        },
    )
    atomic_write_csv(
        _out_path(arguments, ArtifactConstants.DeltaHistogramFileName),
        _histogram_frame(reports),
    )

    return CommonConstants.ExitCodeSuccess


def run_oracle(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)
    n_samples = arguments.samples or settings.JENSENKV_MC_SAMPLES
    n_partition_samples = (
        arguments.partition_samples or settings.JENSENKV_MC_PARTITION_SAMPLES
    )

    if arguments.check:
        checks = run_acceptance_suite(
            config.seed,
            n_samples=n_samples,
            n_partition_samples=n_partition_samples,
        )
        JsonUtils.write(
            _out_path(arguments, ArtifactConstants.AcceptanceFileName),
            {
                'schema_version': ReportConstants.SchemaVersion,
                'seed': config.seed,
                'checks': [check.to_dict() for check in checks],
            },
        )
        require_passed(checks)

        return CommonConstants.ExitCodeSuccess

    bias_config = partition_bias_config(config.seed)
    bias_workload = generate_workload(bias_config)
    partition_bias = {
        str(mode): mc_partition_bias(
            bias_workload,
            bias_config.spec,
            mode,
            n_partition_samples,
            config.seed,
        ).to_dict()
        for mode in (CorrectionMode.NONE, CorrectionMode.TAYLOR, CorrectionMode.EXACT)
    }

    # d = 1, q = 1, step 2 gives alpha = 1
    skew = skew_demo(0.0, 2.0, n_samples, config.seed)
    residual_spec = QuantSpec(
        bits=config.spec.bits,
        group_size=config.spec.group_size,
        scale_format=ScaleFormat.FULL_PRECISION,
        zeropoint_format=ZeroPointFormat.FULL_PRECISION,
        seed=config.seed,
    )

    JsonUtils.write(
        _out_path(arguments, ArtifactConstants.OracleFileName),
        {
            'schema_version': ReportConstants.SchemaVersion,
            'seed': config.seed,
            'closed_form': closed_form_agreement_suite(20, n_samples, config.seed),
            'partition_bias': partition_bias,
            'skew_demo': skew.to_dict(),
            'empirical_residuals': empirical_residual_check(
                residual_spec,
                n_tokens=1024,
                d=config.head_dim,
                seed=config.seed,
            ),
        },
    )

    edges = skew.histogram_edges
    atomic_write_csv(
        _out_path(arguments, ArtifactConstants.SkewHistogramFileName),
        polars.DataFrame(
            {
                'bin_lower': edges[:-1],
                'bin_upper': edges[1:],
                'uncorrected': skew.uncorrected_counts,
                'corrected': skew.corrected_counts,
            },
        ),
    )

    return CommonConstants.ExitCodeSuccess


def run_curve(
    arguments: argparse.Namespace,
) -> int:
    atomic_write_csv(
        _out_path(arguments, ArtifactConstants.CurveFileName),
        curve_frame(parse_alphas(arguments.alphas)),
    )

    return CommonConstants.ExitCodeSuccess


def run_sweep(
    arguments: argparse.Namespace,
) -> int:
    config = resolve_config(arguments)

    with Timer() as timer:
        table = sweep(config)

    atomic_write_csv(
        _out_path(arguments, ArtifactConstants.SweepFileName),
        table,
    )

    logger.info(
        'Sweep of %d rows by %.3fs',
        table.height,
        timer.elapsed,
    )

    return CommonConstants.ExitCodeSuccess


def run_version(
    _arguments: argparse.Namespace,
) -> int:
    print(__version__)

    return CommonConstants.ExitCodeSuccess


_COMMANDS = {
    'gen': run_gen,
    'quantize': run_quantize,
    'attend': run_attend,
    'diagnose': run_diagnose,
    'oracle': run_oracle,
    'curve': run_curve,
    'sweep': run_sweep,
    'version': run_version,
}


def main(
    argv: list[str] | None = None,
) -> int:
    arguments = parse_arguments(argv)

    verbose = getattr(arguments, 'verbose', False)

    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format='%(asctime)s %(levelname)s [%(name)s] %(message)s',
        stream=sys.stdout,
    )

    try:
        return _COMMANDS[arguments.command](arguments)
    except AcceptanceError as exception:
        logger.error('%s', exception)

        return CommonConstants.ExitCodeAcceptanceFailure
    except ValidationError as exception:
        logger.error('Invalid configuration: %s', exception)

        return CommonConstants.ExitCodeUsageError
    except (
        JensenKvError,
        TensorFormatError,
        orjson.JSONDecodeError,
        OSError,
    ) as exception:
        logger.error('%s', exception)

        return CommonConstants.ExitCodeDataError
    except ValueError as exception:
        logger.error('%s', exception)

        return CommonConstants.ExitCodeUsageError


if __name__ == '__main__':
    sys.exit(main())
