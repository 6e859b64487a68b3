"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration, usage, and format
problems exit with 2; numerical failures (NaN/Inf, divergence, instability)
exit with 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, out-of-range settings, broken preconditions."""


class UsageError(ValueError):
    """A function was called with arguments that violate its contract."""


class FormatError(ValueError):
    """A binary or text artifact does not match its documented layout."""


class NumericsError(RuntimeError):
    """Non-finite values, divergence, or an unstable integration."""
