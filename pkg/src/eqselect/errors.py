"""Exception hierarchy shared by all modules."""

from __future__ import annotations

import numpy as np


class EqSelectError(Exception):
    """Base class for every error raised by the package."""


class DomainError(EqSelectError, ValueError):
    """Inputs violate a documented precondition."""


class NumericFailure(EqSelectError, RuntimeError):
    """A numerical routine did not converge or produced an invalid result."""

    def __init__(self, message: str, matrix=None):
        super().__init__(message)
        self.matrix = None if matrix is None else np.array(matrix, dtype=float)


class BoxTooSmallError(NumericFailure):
    """The computational box truncates the solution; carries a suggested box."""

    def __init__(self, message: str, suggested: tuple[float, float] | None = None):
        super().__init__(message)
        self.suggested = suggested


class BlowUpError(NumericFailure):
    """A simulated trajectory left the enlarged box."""

    def __init__(self, message: str, exit_time: float):
        super().__init__(message)
        self.exit_time = exit_time


class StatisticalPowerError(EqSelectError):
    """Not enough samples to compute the requested statistic."""


class ConfigError(EqSelectError):
    """Experiment configuration failed validation."""
