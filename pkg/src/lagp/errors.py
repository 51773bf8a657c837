"""Exception types shared across the package."""


class LagpError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LagpError):
    """Array shapes are incompatible with the requested operation."""


class NotPositiveDefinite(LagpError):
    """A matrix required to be positive definite is not, even after jitter."""


class ConvergenceFailure(LagpError):
    """An iterative routine exhausted its iteration budget."""


class NonFiniteValue(LagpError):
    """A NaN or Inf appeared where finite values are required."""


class CapExceeded(LagpError):
    """A problem size exceeds the configured cap for an exact method."""


class FormatError(LagpError):
    """A binary or text file does not match its documented format."""


class VersionMismatch(FormatError):
    """A serialized file has an unsupported format version."""


class ParseError(LagpError):
    """A text record could not be parsed; carries row/column location."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class EmptyFile(LagpError):
    """An input file contains no usable records."""


class ConfigError(LagpError):
    """An experiment configuration is invalid or incomplete."""


class SimplexViolation(LagpError):
    """Probability rows do not sum to one within tolerance."""


class EigenFloorExhausted(LagpError):
    """Fewer eigenvalues above the floor than features requested."""
