"""Exception types shared across the package."""


class TextgroundError(Exception):
    """Base class for all package errors."""


class ShapeError(TextgroundError, ValueError):
    """Tensor or grid dimensions are inconsistent with the operation."""


class ConfigError(TextgroundError, ValueError):
    """A configuration value is invalid or unknown."""


class ConstraintError(TextgroundError, ValueError):
    """A documented numeric constraint between values is violated."""


class VocabularyError(TextgroundError, ValueError):
    """A caption token is outside the closed synthetic vocabulary."""


class PlacementError(TextgroundError, RuntimeError):
    """Scene generation could not place an object without overlap."""


class GuidanceEmptyError(TextgroundError, RuntimeError):
    """Thresholding a guidance map produced an empty mask."""


class UnsupportedOpError(TextgroundError, RuntimeError):
    """Gradient was requested through a non-differentiable operation."""


class DataError(TextgroundError, ValueError):
    """Input data on disk is missing or malformed."""


class NumericError(TextgroundError, RuntimeError):
    """A non-finite value (NaN/Inf) was produced where finiteness is required."""
