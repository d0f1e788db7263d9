"""Shared exception types, mapped to CLI exit codes in cli.py."""
from __future__ import annotations


class ConfigError(ValueError):
    """Invalid run configuration or malformed input file."""


class DimensionError(ValueError):
    """Tensor shape does not match the network contract."""


class StaleCacheError(RuntimeError):
    """A forward cache was reused for a batch it does not belong to."""


class NumericalError(RuntimeError):
    """Non-finite value where a finite one is required."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-format checkpoint file."""


class InfeasibleError(ValueError):
    """No bit assignment satisfies the average-width constraint."""

    def __init__(self, message: str, achievable: tuple = ()):  # noqa: D107
        super().__init__(message)
        self.achievable = achievable
