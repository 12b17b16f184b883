"""Exception types raised across the package."""

from __future__ import annotations


class SsancError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SsancError, ValueError):
    pass


class OutOfRange(SsancError, IndexError):
    pass


class InsufficientData(InvalidArgument):
    pass


class NumericFailure(SsancError, ArithmeticError):
    """A factorization or iterative method failed.

    ``matrix`` names the offending quantity when known.
    """

    def __init__(self, message: str, matrix: str | None = None) -> None:
        super().__init__(message)
        self.matrix = matrix


class ConvergenceFailure(NumericFailure):
    """Adaptive estimation did not meet its convergence threshold.

    ``misalignment`` carries the final relative tap change (a ratio, not dB).
    """

    def __init__(self, message: str, misalignment: float) -> None:
        super().__init__(message)
        self.misalignment = misalignment


class ConfigError(SsancError):
    """Experiment configuration could not be parsed or violates an invariant."""
