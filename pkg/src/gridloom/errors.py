"""Exception types shared across the package."""


class GridloomError(Exception):
    """Base class for all package errors."""


class ShapeError(GridloomError):
    """Operand shapes are incompatible."""


class NonFiniteError(GridloomError):
    """A NaN or Inf appeared where only finite values are allowed."""


class LayoutError(GridloomError):
    """A token sequence layout violates its structural contract."""


class MaskError(GridloomError):
    """A visibility mask cannot be compiled or is malformed."""


class DecodeError(GridloomError):
    """Model output could not be parsed as well-formed DSL."""


class ConfigError(GridloomError):
    """A configuration file or key is invalid."""


class ValidationError(GridloomError):
    """A dataset record or trace failed integrity checks."""
