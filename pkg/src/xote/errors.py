"""Exception types shared across the package."""


class XoteError(Exception):
    """Base class for all errors raised by xote."""


class ConfigError(XoteError, ValueError):
    """Shapes, flags or configuration values that do not fit together."""


class NumericError(XoteError, ArithmeticError):
    """Non-finite values or failed numerical convergence."""


class FormatError(XoteError, ValueError):
    """A file or stream does not follow the expected layout."""


class DataError(XoteError, ValueError):
    """Annotated data that is internally inconsistent."""


class AlignmentError(DataError):
    """A target span does not line up with token boundaries."""


class NumericWarning(UserWarning):
    """Recoverable numerical issue, e.g. a clamped log argument."""
