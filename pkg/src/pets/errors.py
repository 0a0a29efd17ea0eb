"""Exception hierarchy shared by every module."""
from __future__ import annotations



class PetsError(Exception):
    """Base class for all library errors."""


class InvalidInput(PetsError, ValueError):
    pass


class InvalidConfig(PetsError, ValueError):
    pass


class ShapeError(PetsError, ValueError):
    pass


class StateError(PetsError, RuntimeError):
    pass


class DegenerateSpectrum(PetsError, ValueError):
    pass


class DegenerateDenominator(PetsError, ZeroDivisionError):
    pass


class ParseError(PetsError, ValueError):
    def __init__(self, row: int, col: int, value: str, path: str = ""):
        self.row, self.col, self.value, self.path = row, col, value, path
        where = f"{path}:" if path else ""
        super().__init__(f"{where}row {row}, column {col}: cannot parse {value!r} as a number")


class NumericalError(PetsError, FloatingPointError):
    """Non-finite values during training; ``diagnostics`` maps parameter path to grad norm."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
