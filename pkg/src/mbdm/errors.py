"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit with 2,
data validation with 3 and numeric failures with 4.
"""


class MBDMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MBDMError, ValueError):
    exit_code = 2


class UsageError(MBDMError, RuntimeError):
    exit_code = 2


class DomainError(MBDMError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    exit_code = 2


class DataValidationError(MBDMError, ValueError):
    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GenerationError(MBDMError, RuntimeError):
    exit_code = 3


class NumericFailure(MBDMError, FloatingPointError):
    """A computation produced NaN or infinity.

    ``context`` carries whatever locates the failure (layer index, sigma,
    example index, sampler step...).
    """

    exit_code = 4

    def __init__(self, message, **context):
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context
