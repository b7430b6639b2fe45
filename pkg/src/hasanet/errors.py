"""Exception types shared across the package."""
from __future__ import annotations


class HasaNetError(Exception):
    """Base class; ``module`` names the subsystem that raised."""

    module = "hasanet"
    hint = ""

    def __init__(self, message: str = "", *, module: str | None = None, hint: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module
        if hint is not None:
            self.hint = hint

    def __str__(self):
        msg = super().__str__()
        if self.hint:
            msg = f"{msg} (hint: {self.hint})"
        return msg


class ValidationError(HasaNetError, ValueError):
    """Bad input or configuration; detected before any heavy compute."""


class CapabilityError(HasaNetError):
    """A provider cannot do what the caller asked (missing weights, frozen-only, ...)."""

    module = "features"


class UndefinedCorrelation(HasaNetError, ArithmeticError):
    """Correlation requested on a constant vector."""

    module = "metrics"


class TrainingError(HasaNetError, RuntimeError):
    module = "training"
