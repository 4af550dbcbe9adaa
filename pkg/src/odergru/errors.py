"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A NaN/Inf was produced or received, or a factorisation failed."""


class ConfigError(ValueError):
    """A configuration document failed validation."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""
