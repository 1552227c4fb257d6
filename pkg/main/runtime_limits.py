import os

from settings import settings

_THREAD_ENV_VARS = (
    'OMP_NUM_THREADS',
    'OPENBLAS_NUM_THREADS',
    'MKL_NUM_THREADS',
    'POLARS_MAX_THREADS',
)


def apply_runtime_limits() -> None:
    # Must run before numpy / polars spin up their thread pools
    if settings.JENSENKV_THREADS is None:
        return

    for name in _THREAD_ENV_VARS:
        os.environ[name] = str(settings.JENSENKV_THREADS)
