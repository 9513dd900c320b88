"""Exception hierarchy shared by every module in the package."""


class DealBalanceError(Exception):
    """Base class for all package errors."""


class ParseError(DealBalanceError):
    """A graph or scenario file contains a malformed line."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ValidationError(DealBalanceError):
    """Input parsed but violates a structural invariant."""


class InvalidParameter(DealBalanceError, ValueError):
    pass


class BudgetExceeded(DealBalanceError):
    """The brute-force oracle hit its state-space cap."""


class UnexpectedAck(DealBalanceError):
    pass
