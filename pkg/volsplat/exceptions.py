"""Error types raised by the library; the CLI maps them to exit codes."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from volsplat.models import Checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class VolsplatError(Exception):
    exit_code: int = EXIT_USAGE


class DomainError(VolsplatError, ValueError):
    """Input outside the mathematical domain (non-SPD covariance, degenerate ray)."""


class ConfigurationError(VolsplatError, ValueError):
    """Incompatible or out-of-range options."""


class UsageError(VolsplatError, ValueError):
    """Caller mistake: mismatched shapes, missing forward cache."""


class DataError(VolsplatError, ValueError):
    exit_code = EXIT_DATA


class NumericalError(VolsplatError, RuntimeError):
    """Training diverged; carries the last checkpoint with finite state."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, checkpoint: Checkpoint | None = None, **context: Any) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint
        self.context = context
