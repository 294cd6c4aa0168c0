"""Exception types shared across the package."""


class DactError(Exception):
    """Base class for all errors raised by dact."""


class FormatError(DactError):
    """A file could not be parsed."""


class MalformedHeader(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


class DimensionMismatch(FormatError):
    """Payload size disagrees with the dimensions declared in the header."""


class NonFiniteError(DactError):
    """NaN or infinity where finite values are required."""


class RangeError(DactError):
    """Intensities outside the canonical [0, 1] range."""


class ShapeMismatch(DactError, ValueError):
    pass


class NonDivisible(DactError, ValueError):
    """Image dimensions are not divisible by the downsampling factor."""


class EmptyImage(DactError, ValueError):
    pass


class ZeroRow(DactError):
    """A transport plan row carries no mass."""


class NonConvergence(DactError):
    """Sinkhorn did not reach the requested marginal tolerance.

    Only raised on request; by default the plan is returned and flagged.
    """


class ImageTooSmall(DactError, ValueError):
    pass


class ProtocolViolation(DactError):
    """An external denoiser process broke the frame protocol."""
