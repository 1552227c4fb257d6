"""
Exception hierarchy of the library; the CLI maps these onto exit codes.
"""

from utils.serialization import (
    TensorFormatError,
)

__all__ = [
    'AcceptanceError',
    'JensenKvError',
    'QuantizationError',
    'RotationError',
    'ShapeMismatchError',
    'TensorFormatError',
]


class JensenKvError(ValueError):
    pass


class QuantizationError(JensenKvError):
    pass


class RotationError(JensenKvError):
    pass


class ShapeMismatchError(JensenKvError):
    pass


class AcceptanceError(Exception):
    """An acceptance check ran to completion and failed its threshold."""

    def __init__(
        self,
        failed_checks: list[str],
    ) -> None:
        super().__init__(
            f'Acceptance checks failed: {", ".join(failed_checks)}',
        )

        self.failed_checks = failed_checks
