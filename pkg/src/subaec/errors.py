"""Package-wide exception types."""


class ConfigurationError(ValueError):
    """Invalid sizes, rates, or option combinations."""


class FilterDesignError(ValueError):
    """Filter-bank or room specification that cannot be realized."""


class TrainingError(RuntimeError):
    """Non-recoverable fault during optimization (NaN loss/gradient)."""
