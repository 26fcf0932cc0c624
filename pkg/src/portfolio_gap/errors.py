"""Exception hierarchy.

Each family maps onto a CLI exit code: validation problems exit with 2,
numerical failures with 3 and I/O problems with 4.
"""


class PortfolioError(Exception):
    exit_code = 1


class ValidationError(PortfolioError, ValueError):
    exit_code = 2


class NumericalError(PortfolioError, ArithmeticError):
    exit_code = 3


class DataIOError(PortfolioError, OSError):
    exit_code = 4


class LoadError(ValidationError):
    """A table could not be joined, e.g. an id is missing from one file."""


class ParseError(ValidationError):
    def __init__(self, path, row, column, value):
        super().__init__(
            f"{path}: row {row}, column {column!r}: cannot parse {value!r} as a number"
        )
        self.path = path
        self.row = row
        self.column = column


class DegenerateInputError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class AlreadyAlignedError(ValidationError):
    pass


class NotAlignedError(ValidationError):
    pass


class UndefinedCorrelationError(NumericalError):
    pass
