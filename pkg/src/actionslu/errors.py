"""Exception types shared across the package."""


class ActionSLUError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ActionSLUError):
    """Raised when an operation receives non-finite or malformed input."""


class ShapeError(ActionSLUError):
    """Raised on incompatible tensor extents."""


class TapeStateError(ActionSLUError):
    """Raised when a tape is replayed twice without a reset."""


class GradCheckError(ActionSLUError):
    """Raised when the function under check is not deterministic."""


class CapacityError(ActionSLUError):
    """Raised when a sequence exceeds the configured maximum length."""


class ParseError(ActionSLUError):
    """Raised on malformed corpus files; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SamplingError(ActionSLUError):
    """Raised when a stratified sample cannot be drawn."""


class ModeError(ActionSLUError):
    """Raised when a candidate-scoring mode is used outside its domain."""


class OptimizerError(ActionSLUError):
    """Raised when an optimizer step must abort (e.g. non-finite gradient)."""


class CheckpointError(ActionSLUError):
    """Raised on malformed or incompatible checkpoint files."""
