"""Exception types raised by the adaptation engine.

Everything catchable at the CLI boundary derives from OttaError so that
runtime failures can be reported with a stable exit code while programming
errors keep their ordinary tracebacks.
"""


class OttaError(Exception):
    """Base class for structured engine errors."""


class InvalidConfig(OttaError, ValueError):
    """A configuration value is outside its documented domain."""


class ShapeMismatch(OttaError, ValueError):
    """Two arrays that must agree in shape do not."""


class NonFiniteKernel(OttaError, FloatingPointError):
    """The scaling-form Sinkhorn kernel cannot be represented in float64."""


class ZeroVector(OttaError, ValueError):
    """A vector that must be normalized has (near-)zero norm."""


class IndexOutOfRange(OttaError, IndexError):
    """A template index is outside the bank's range."""


class InvalidTemperature(OttaError, ValueError):
    """Softmax temperature must be strictly positive."""


class NonFiniteLoss(OttaError, FloatingPointError):
    """A loss or gradient evaluated to NaN or infinity."""


class EmptyBatch(OttaError, ValueError):
    """A batch with zero samples was passed to an operation that needs data."""


class ParseError(OttaError, ValueError):
    """An embedding file violates the binary format contract.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidSpec(OttaError, ValueError):
    """A synthetic-scenario specification is internally inconsistent."""
