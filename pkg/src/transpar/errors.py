"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, labels, configs or paths. CLI exit code 2."""

    exit_code = 2


class NumericFailure(ArithmeticError):
    """A NaN or Inf appeared in a forward or backward pass. CLI exit code 3."""

    exit_code = 3

    def __init__(self, message, rows=None):
        super().__init__(message)
        # metrics rows gathered before the failure, so callers can flush them
        self.rows = list(rows) if rows is not None else []
