"""Exception types shared across the package."""


class TermvelError(Exception):
    """Base class for all structured errors raised by termvel."""


class ShapeError(TermvelError, ValueError):
    pass


class NonFiniteError(TermvelError, FloatingPointError):
    """A value that must be finite was not.  ``where`` names the offending term."""

    def __init__(self, where, message=None):
        self.where = where
        super().__init__(message or f"non-finite value in {where}")


class UnsupportedOpError(TermvelError, TypeError):
    """An op without a forward-mode rule was reached while tangents were live."""

    def __init__(self, op):
        self.op = op
        super().__init__(f"op {op!r} has no forward-mode (tangent) rule")


class CheckpointError(TermvelError, IOError):
    pass


class ConfigError(TermvelError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
