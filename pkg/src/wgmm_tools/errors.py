# src/wgmm_tools/errors.py

# Exit codes used by the entry scripts
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class WgmmError(Exception):
    """Base class for every error raised by the library."""
    exit_code = EXIT_DATA


class DataError(WgmmError, ValueError):
    """Invalid inputs: shapes, simplex vectors, malformed files, empty streams."""
    exit_code = EXIT_DATA


class SchemaError(DataError):
    """A model/dictionary file does not match its JSON schema."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class NumericalError(WgmmError, ArithmeticError):
    """Non-finite values or solver failures."""
    exit_code = EXIT_NUMERICAL
