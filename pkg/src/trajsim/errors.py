"""Shared exception types mapped to CLI exit codes."""


class DataError(Exception):
    """Malformed input data or file contents (CLI exit 2)."""


class FormatError(DataError):
    """Bad magic bytes, truncation, or structural corruption in a binary file."""


class VersionError(DataError):
    """File declares a format version this build does not understand."""


class ParseError(DataError):
    """Malformed line in a trajectory text file."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NumericError(Exception):
    """Non-finite values where finite ones are required (CLI exit 3)."""
