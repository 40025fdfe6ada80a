"""Exception types shared across the package.

Exit-code mapping used by the CLI: usage errors exit 1, ParseError /
ValidationError exit 2, anything else exits 3.
"""


class GsvvError(Exception):
    """Base class for all package errors."""


class ParseError(GsvvError):
    """A file or stream could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(GsvvError):
    """Data parsed fine but violates an invariant."""
