"""Exception hierarchy shared by the library and the CLI.

Each error carries the exit code the CLI uses when it escapes a command:
2 for configuration or input problems, 3 for missing artifacts, 4 for
numerical failures.
"""

from typing import Any, Mapping, Optional


class BackdoorToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class InvalidInputError(BackdoorToolkitError, ValueError):
    """An operation was called with arguments outside its contract."""

    exit_code = 2


class ConfigurationError(BackdoorToolkitError):
    """The experiment configuration is invalid.

    Args:
        message: Human readable description
        field_path: Dotted path of the offending field (e.g. ``poison.alpha``)
    """

    exit_code = 2

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class MissingArtifactError(BackdoorToolkitError, FileNotFoundError):
    """A stage needs an upstream artifact that does not exist."""

    exit_code = 3


class NumericalError(BackdoorToolkitError, ArithmeticError):
    """A loss or parameter became non-finite."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Mapping[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class StageError(BackdoorToolkitError):
    """Wraps a failure with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")


__all__ = [
    "BackdoorToolkitError",
    "ConfigurationError",
    "InvalidInputError",
    "MissingArtifactError",
    "NumericalError",
    "StageError",
]
