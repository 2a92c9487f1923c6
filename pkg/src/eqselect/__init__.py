"""Optimal equilibrium selection for small-noise diffusions with expensive control."""

from .errors import (BlowUpError, BoxTooSmallError, ConfigError, DomainError, EqSelectError,
                     NumericFailure, StatisticalPowerError)

__version__ = "0.1.0"
