from main.runtime_limits import apply_runtime_limits

# Thread caps only take effect if set before numpy loads its BLAS
apply_runtime_limits()

__version__ = '0.1.0'
