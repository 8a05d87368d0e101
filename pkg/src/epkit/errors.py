"""Exception types shared across the package."""


class EpkitError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(EpkitError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(EpkitError, ValueError):
    """A scalar argument lies outside the mathematical domain of a function."""


class FormatError(EpkitError, ValueError):
    """A binary file does not match the expected layout.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class NumericalError(EpkitError, ArithmeticError):
    """A computation produced a non-finite intermediate value."""


class TrainingDiverged(EpkitError, RuntimeError):
    """Training hit a non-finite loss.  Carries the last good step index and
    the partial path accumulated up to that step."""

    def __init__(self, message: str, step: int, partial_path=None):
        super().__init__(message)
        self.step = step
        self.partial_path = partial_path


class InvalidPath(EpkitError, ValueError):
    """A training path is missing checkpoints required by the operation."""


class ReductionInvalid(EpkitError, RuntimeError):
    """The single-kernel reduction was requested for a path whose loss
    gradient is not constant across steps."""
