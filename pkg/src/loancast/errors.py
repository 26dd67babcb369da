class LoancastError(Exception):
    pass


class DimensionError(LoancastError, ValueError):
    """Shapes or extents that do not fit together."""


class ContractError(LoancastError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(LoancastError, IOError):
    """Malformed, truncated or incompatible binary file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
