"""Exception types raised across the package."""


class ScdmError(Exception):
    """Base class for all package errors."""


class MapFormatError(ScdmError):
    """A label-map or image file has a malformed header."""


class CellValueError(ScdmError):
    """A label-map cell lies outside ``{0, ..., C}``."""


class TruncatedFileError(ScdmError):
    """A file ends before its declared payload."""


class NumericError(ScdmError, ArithmeticError):
    """A computation produced a non-finite or degenerate value."""


class InvariantError(ScdmError):
    """An internal invariant (e.g. gamma < 1) was violated."""


class ContractError(ScdmError):
    """A caller broke an API precondition that is not a plain bad argument."""


class TrainingError(ScdmError):
    """Training produced a non-finite loss."""
