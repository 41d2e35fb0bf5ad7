"""Exception hierarchy shared by every module."""


class SeqRerandError(Exception):
    """Base class for all library errors."""


class DomainError(SeqRerandError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeMismatch(SeqRerandError, ValueError):
    """Array dimensions are inconsistent with each other."""


class RankDeficient(SeqRerandError, ArithmeticError):
    """A covariance factorization met a non-positive pivot.

    ``column`` is the index of the covariate (row of the data matrix) whose
    pivot failed, which usually points at a collinear or constant covariate.
    """

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class UnderflowError(SeqRerandError, ArithmeticError):
    """An acceptance probability is too small to represent."""


class InfeasibleBudget(SeqRerandError, ValueError):
    """The total budget cannot satisfy the per-group floor."""


class ParseError(SeqRerandError, ValueError):
    """A covariate file could not be parsed."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(SeqRerandError, ValueError):
    """An ingestion schema is malformed or does not match the file."""


class AllMissingColumn(SchemaError):
    """A column has no observed value to impute from."""
