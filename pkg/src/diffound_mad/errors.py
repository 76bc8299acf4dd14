"""Exception hierarchy and process exit codes for diffound-mad."""

from enum import IntEnum
from typing import Any, Dict, Optional


class ExitCode(IntEnum):
    """Process exit codes used by the CLI."""

    OK = 0
    FAILURE = 1
    VALIDATION = 3
    IO = 4
    COMPATIBILITY = 5
    PROTOCOL = 6
    DIVERGED = 7


class DiffoundError(Exception):
    """Base class for every error raised by this package."""

    exit_code: ExitCode = ExitCode.FAILURE


class ShapeError(DiffoundError, ValueError):
    """Operand shapes do not agree."""


class DomainError(DiffoundError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class NumericalError(DiffoundError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by '{op}'")


class ContractError(DiffoundError):
    """A caller broke an operation's precondition."""


class ConfigValidationError(DiffoundError, ValueError):
    """A configuration field is missing or invalid."""

    exit_code = ExitCode.VALIDATION

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message)


class ArtifactIOError(DiffoundError, OSError):
    """A config, dataset or checkpoint could not be read or written."""

    exit_code = ExitCode.IO

    def __init__(self, message: str, path: Any = None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class CompatibilityError(DiffoundError):
    """A checkpoint does not match the dataset or format it is used with."""

    exit_code = ExitCode.COMPATIBILITY


class ProtocolError(DiffoundError):
    """An evaluation or data protocol cannot be satisfied."""

    exit_code = ExitCode.PROTOCOL


class TrainingDivergedError(DiffoundError):
    """Training produced a non-finite loss."""

    exit_code = ExitCode.DIVERGED

    def __init__(
        self,
        message: str,
        batch_index: Optional[int] = None,
        parameter_norms: Optional[Dict[str, float]] = None,
    ):
        self.batch_index = batch_index
        self.parameter_norms = parameter_norms or {}
        super().__init__(message)
