"""Shared exception types."""


class RtgeeError(Exception):
    """Base class for errors raised by this package."""


class DegenerateScaleError(RtgeeError):
    """Residual spread is zero, so no robust scale can be estimated."""


class EstimationError(RtgeeError):
    """A linear system or moment estimate could not be computed."""


class DataFormatError(RtgeeError):
    """A dataset file or record violates the long-format schema."""
