"""Exception hierarchy shared by every module."""


class VTransEError(Exception):
    """Base class for all package errors."""


class DimensionError(VTransEError, ValueError):
    pass


class DegenerateBoxError(VTransEError, ValueError):
    pass


class EmptyBatchError(VTransEError, ValueError):
    pass


class ConfigurationError(VTransEError, ValueError):
    pass


class NumericError(VTransEError, FloatingPointError):
    """A public operation produced a NaN or Inf."""


class DataError(VTransEError):
    """Base for problems with input files."""


class ParseError(DataError, ValueError):
    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class IntegrityError(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class QueryError(VTransEError, ValueError):
    pass


class GenerationError(VTransEError, RuntimeError):
    pass
