"""
Error types for the generative MIL toolkit
All library failures derive from MilError so callers can catch one type
"""

from typing import Optional


class MilError(Exception):
    """Base class for every toolkit error"""


class InvalidLabelError(MilError, ValueError):
    """A label lies outside the label domain {1..t}"""


class InvalidInputError(MilError, ValueError):
    """Malformed input such as an empty label sequence"""


class InsufficientDataError(MilError):
    """Too few samples to fit a model component"""

    def __init__(self, message: str, label: Optional[int] = None, iteration: Optional[int] = None):
        super().__init__(message)
        self.label = label
        self.iteration = iteration

    def at_iteration(self, iteration: int) -> "InsufficientDataError":
        """Return a copy annotated with the EM iteration that failed"""
        return InsufficientDataError(
            f"EM iteration {iteration}: {self}", label=self.label, iteration=iteration
        )


class InvalidStateError(MilError):
    """Stored latent labels violate compatibility or feasibility"""


class UnsupportedDomainError(MilError):
    """A component was requested for a label domain it cannot model"""


class DimensionMismatchError(MilError, ValueError):
    """Feature dimension disagrees with the fitted model"""


class ParseError(MilError):
    """An input file could not be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigurationError(MilError):
    """Invalid run or generator configuration"""


class ModelFormatError(MilError):
    """A serialized model file is malformed or has an unknown schema"""
