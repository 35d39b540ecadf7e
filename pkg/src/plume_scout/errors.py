"""Exception hierarchy; each class maps onto one CLI exit category."""


class PlumeScoutError(Exception):
    category = "ERROR"


class ConfigError(PlumeScoutError, ValueError):
    category = "CONFIG"


class CubeIOError(PlumeScoutError, OSError):
    category = "IO"


class NumericError(PlumeScoutError, ArithmeticError):
    category = "NUMERIC"


class UnfittableError(NumericError):
    """Raised when a candidate cannot be scored (e.g. too few background pairs).

    Distinct from a poor fit: an unfittable candidate carries no D_norm.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
