"""Exception types raised across the package."""


class FmenError(Exception):
    """Base class for all contract violations raised by fmen."""


class ShapeError(FmenError, ValueError):
    pass


class ConfigError(FmenError, ValueError):
    pass


class PatternError(FmenError):
    """A train-form subgraph could not be recognised for fusion."""


class WeightFileError(FmenError):
    pass


class ImageFormatError(FmenError):
    pass
