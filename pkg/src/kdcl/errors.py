"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for malformed or out-of-range run configuration."""


class NumericalError(RuntimeError):
    """Raised when filter linear algebra degenerates (e.g. a non-positive
    innovation covariance)."""
