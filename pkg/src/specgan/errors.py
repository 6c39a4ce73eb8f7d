"""Exception types shared across the package.

The CLI maps these onto process exit codes (2 validation, 3 numerical,
4 I/O); I/O failures use the builtin ``OSError`` family.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ShapeError(ValidationError):
    """Tensor or matrix has an unexpected shape."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
