"""
errors.py - Exception hierarchy for the conservative scheme toolkit
-------------------------------------------------------------------
The numerical core raises these; the solver turns the step-level ones into
rejection reasons and the runner turns everything into a failed result dict.
"""

from typing import Optional, Tuple


class MultiplierMethodError(Exception):
    """Base class for every error raised by this package."""


class StencilRangeError(MultiplierMethodError, IndexError):
    """A stencil reached outside a non-periodic axis."""


class SingularMultiplierError(MultiplierMethodError, ArithmeticError):
    """The discrete multiplier is singular at a point and no guarded branch exists."""

    def __init__(self, message: str, point: Optional[Tuple[int, ...]] = None, value: float = 0.0):
        super().__init__(message)
        self.point = point
        self.value = value


class InadmissibleStateError(MultiplierMethodError, ValueError):
    """State outside the problem's admissible set (e.g. non-positive populations)."""


class InitialDataError(MultiplierMethodError, ValueError):
    """Initial data incomplete for the requested startup mode."""


class UnknownProblemError(MultiplierMethodError, KeyError):
    """Problem name not in the catalog."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown problem"


class ParameterRangeError(MultiplierMethodError, ValueError):
    """Problem parameter missing, unknown or outside its admissible range."""


class ConfigError(MultiplierMethodError, ValueError):
    """Invalid experiment configuration; `path` is the dotted key."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
