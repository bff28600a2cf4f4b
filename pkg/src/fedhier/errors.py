"""Exception types raised across the package."""

from __future__ import annotations


class FedHierError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FedHierError, ValueError):
    pass


class DimensionError(FedHierError, ValueError):
    pass


class DivergenceError(FedHierError, ArithmeticError):
    pass


class ConfigError(FedHierError, ValueError):
    """Raised with the full list of violated constraints."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CapacityError(FedHierError, ValueError):
    pass


class ParseError(FedHierError, ValueError):
    pass
