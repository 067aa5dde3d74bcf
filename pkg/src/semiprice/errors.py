"""Exception types raised across the package."""


class SemipriceError(Exception):
    """Base class for package errors."""


class ConfigError(SemipriceError, ValueError):
    """Invalid environment, policy or run configuration."""


class InsufficientDataError(SemipriceError, ValueError):
    """Too few rows to fit an estimator."""


class NumericalError(SemipriceError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


class InversionError(NumericalError):
    """No point of the search interval solves phi(x) = target acceptably."""


class SelectionError(SemipriceError):
    """Cross-validation produced no defined fit for any candidate."""
