class FormatError(ValueError):
    """A file does not match its on-disk format."""


class ShapeError(ValueError):
    """Array or layer dimensions are inconsistent."""


class DataError(ValueError):
    """Input data is missing, unreadable or unusable."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value (e.g. NaN loss)."""
