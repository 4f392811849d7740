"""Exception types raised across the package."""


class EmdSplatError(Exception):
    """Base class for all package errors."""


class ShapeError(EmdSplatError, ValueError):
    pass


class DegenerateCovarianceError(EmdSplatError, ValueError):
    pass


class NormalizationError(EmdSplatError, ValueError):
    pass


class DomainError(EmdSplatError, ValueError):
    pass


class DegenerateRotationError(EmdSplatError, ValueError):
    pass


class OutOfRegimeError(EmdSplatError, ValueError):
    pass


class EmptyRegionError(EmdSplatError, ValueError):
    pass


class ConsistencyError(EmdSplatError, RuntimeError):
    pass


class NumericError(EmdSplatError, FloatingPointError):
    """A non-finite value appeared. ``tensor`` and ``index`` locate it when known."""

    def __init__(self, message, tensor=None, index=None):
        super().__init__(message)
        self.tensor = tensor
        self.index = index


class ConfigError(EmdSplatError, ValueError):
    pass


class FormatError(EmdSplatError, ValueError):
    pass
