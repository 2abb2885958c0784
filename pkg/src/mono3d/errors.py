"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes or dimensions incompatible with the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where only finite ones are valid."""


class UsageError(RuntimeError):
    """API misuse: wrong call order, missing inputs, non-scalar loss."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class DegenerateGeometryError(ValueError):
    """Zero-area boxes, non-positive 2D heights and similar degenerate input."""


class ParseError(ValueError):
    """Malformed text input; carries the 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
