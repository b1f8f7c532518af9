"""Exception hierarchy shared across the package."""


class RisFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(RisFusionError, ValueError):
    pass


class NonFiniteError(RisFusionError, FloatingPointError):
    pass


class FormatError(RisFusionError, ValueError):
    """A file did not match the expected binary or image format."""


class ValidationError(RisFusionError, ValueError):
    pass


class TrainingError(RisFusionError, RuntimeError):
    pass
