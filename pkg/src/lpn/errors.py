"""Exception types raised across the package."""


class LPNError(Exception):
    """Base class for all package errors."""


class ValidationError(LPNError, ValueError):
    """A grid, task or config violates its documented bounds."""


class InvalidShape(ValidationError):
    pass


class ParseError(LPNError, ValueError):
    pass


class EmptySet(LPNError, ValueError):
    pass


class ShapeMismatch(LPNError, ValueError):
    pass


class NonFinite(LPNError, FloatingPointError):
    pass


class MissingTruth(LPNError, ValueError):
    pass


class EmptySpecification(LPNError, ValueError):
    pass


class WrongLatentDim(LPNError, ValueError):
    pass


class CheckpointMismatch(LPNError):
    pass


class UnsupportedVersion(LPNError):
    pass


class ChecksumMismatch(LPNError):
    pass


class CorruptCheckpoint(LPNError):
    pass
