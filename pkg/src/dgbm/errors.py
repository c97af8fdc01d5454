"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DGBMError(Exception):
    """Base class for all errors raised by dgbm."""


class InvalidParameterError(DGBMError, ValueError):
    """A hyper-parameter or level is outside its admissible range."""


class InvalidInputError(DGBMError, ValueError):
    """Input arrays have the wrong shape, length or content."""


class OutOfSupportError(DGBMError, ValueError):
    """A value lies outside the attainable range of a bounded flow.

    Attributes:
        lower: Lower end of the attainable open interval.
        upper: Upper end of the attainable open interval.
    """

    def __init__(self, message: str, lower=None, upper=None):
        super().__init__(message)
        self.lower = lower
        self.upper = upper


class NumericalError(DGBMError, ArithmeticError):
    """Training produced non-finite losses or derivatives."""


class ModelFormatError(DGBMError):
    """A model file is malformed or has an unsupported schema."""


class DataError(DGBMError):
    """A data file could not be parsed."""


class ConfigError(DGBMError):
    """A run configuration violates one or more bounds.

    Attributes:
        problems: Every violated constraint, one message each.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))
