"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller supplied data that violates an operation's preconditions."""


class FormatError(InputError):
    """A file on disk is malformed."""


class ConfigError(ValueError):
    """An aggregator, attack or experiment configuration is inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or undefined value."""
