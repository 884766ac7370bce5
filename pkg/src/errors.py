class T4DError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(T4DError, ValueError):
    pass


class GridMismatchError(T4DError, ValueError):
    pass


class ShapeMismatchError(T4DError, ValueError):
    pass


class FileFormatError(T4DError):
    pass


class NumericError(T4DError, ArithmeticError):
    pass
