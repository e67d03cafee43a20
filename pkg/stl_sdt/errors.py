"""Exception hierarchy shared by every stl-sdt module."""

from typing import Any, Dict, Iterable, Optional


class StlSdtError(Exception):
    """Base class for all errors raised by stl-sdt.

    Attributes:
        exit_code: Process exit code the CLI uses when this error escapes a command.
    """

    exit_code = 1

    def to_dict(self) -> Dict[str, Any]:
        """Return the error record printed by the CLI."""
        return {
            "type": "ERROR",
            "name": type(self).__name__,
            "message": str(self),
        }


class UsageError(StlSdtError):
    """Invalid configuration or command arguments."""

    exit_code = 2


class DataError(StlSdtError):
    """Malformed input data, formulas or files."""

    exit_code = 3


class NumericalError(StlSdtError):
    """Non-finite values or degenerate numerical inputs."""

    exit_code = 4


class FormulaSyntaxError(DataError):
    """A formula text does not conform to the grammar."""

    def __init__(
        self, message: str, line: int, column: int, expected: Iterable[str] = ()
    ) -> None:
        self.line = line
        self.column = column
        self.expected = sorted(set(expected))
        detail = f"{message} at line {line}, column {column}"
        if self.expected:
            detail += f"; expected one of: {', '.join(self.expected)}"
        super().__init__(detail)


class IntervalError(DataError):
    """A temporal interval with a lower bound above its upper bound."""


class UnknownChannelError(DataError):
    """A predicate references a channel missing from the signal schema."""


class UnknownPredicateLabelError(DataError):
    """A predicate selector matched no labeled leaf."""


class SignalError(DataError):
    """A signal violates its shape or finiteness invariants."""


class StepIndexError(DataError):
    """A 1-indexed step lies outside [1, T]."""


class DatasetSchemaError(DataError):
    """A dataset row violates the trajectory file schema."""

    def __init__(
        self, message: str, row: int, field: Optional[str] = None,
        trajectory: Optional[int] = None,
    ) -> None:
        self.row = row
        self.field = field
        self.trajectory = trajectory
        where = f"row {row}"
        if trajectory is not None:
            where += f" (trajectory {trajectory})"
        if field is not None:
            where += f", field '{field}'"
        super().__init__(f"{where}: {message}")


class MissingStatsError(DataError):
    """Dataset statistics required by an operation are not available."""


class SchemaMismatchError(DataError):
    """Checkpoint, environment and formula schemas disagree."""


class CheckpointError(DataError):
    """A checkpoint file is missing or malformed."""


class ShapeError(NumericalError):
    """Incompatible array shapes passed to a differentiable primitive."""

    def __init__(self, primitive: str, *shapes: Any) -> None:
        self.primitive = primitive
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {rendered}")
