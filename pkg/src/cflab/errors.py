"""Exception hierarchy shared by all cflab modules."""


class CflabError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(CflabError, ValueError):
    """Invalid sizes, parameters or experiment configuration."""


class ValidationError(CflabError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(CflabError, ValueError):
    """A text input could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(CflabError, ValueError):
    """A dataset or log without any usable records."""


class MissingPropensityError(CflabError, KeyError):
    """A propensity was requested for a query or document that was never logged."""


class EstimatorError(CflabError, ArithmeticError):
    """An estimator cannot be evaluated, e.g. due to a zero propensity."""


class UsageError(CflabError, RuntimeError):
    """An operation was invoked outside of its contract."""


class TrainingDivergedError(CflabError, FloatingPointError):
    """Optimization produced non-finite parameters."""


class DegenerateBaselineError(EstimatorError):
    """The optimal-baseline denominator vanishes, e.g. when the target equals the logging policy."""
