class ConfigError(ValueError):
    """Invalid experiment, stream or schedule configuration."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DomainError(ValueError):
    """An operation was called outside its mathematical domain."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class OracleError(ArithmeticError):
    """A verification oracle met a non-finite evaluation."""
