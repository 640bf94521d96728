"""
Exception hierarchy shared by the library and the experiment harness.
"""
from typing import Optional


class ArsamError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(ArsamError, ValueError):
    """An argument is outside the domain of the operation."""


class InvalidSpecError(ArsamError, ValueError):
    """An objective or model specification is inconsistent."""


class InvalidSelectorError(ArsamError, ValueError):
    """A layer selector does not fit the vector's layout."""


class ShapeError(ArsamError, ValueError):
    """Two vectors (or a vector and a model) disagree on layout."""


class ConfigError(ArsamError, ValueError):
    """A run configuration could not be loaded or validated."""


class NumericError(ArsamError, ArithmeticError):
    """A non-finite value appeared during evaluation.

    Args:
        message: What went wrong
        iteration: Optimizer iteration the failure happened in, when known
    """

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.message = message
        self.iteration = iteration
        super().__init__(str(self))

    def with_iteration(self, iteration: int) -> "NumericError":
        return NumericError(self.message, iteration=iteration)

    def __str__(self) -> str:
        if self.iteration is None:
            return self.message
        return f"{self.message} (iteration {self.iteration})"
