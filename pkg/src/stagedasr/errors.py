"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so failures are distinguishable
from scripts (config 2, data 3, divergence 4, I/O 5).
"""


class StagedAsrError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(StagedAsrError, ValueError):
    """Tensor shape or dimension mismatch."""

    exit_code = 2


class ConfigError(StagedAsrError, ValueError):
    """Invalid configuration, hyperparameters, or incompatible inputs."""

    exit_code = 2


class DataError(StagedAsrError, ValueError):
    """Dataset or corpus content is unusable for the requested operation."""

    exit_code = 3


class NumericsError(StagedAsrError, ArithmeticError):
    """A computation produced or consumed non-finite values."""

    exit_code = 4


class DivergenceError(StagedAsrError, RuntimeError):
    """Training loss became non-finite; last good parameters are retained."""

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good

    exit_code = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StagedAsrError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 5
    return 1
