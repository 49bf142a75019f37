"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
ingestion problems exit 3, numerical failures exit 4.
"""


class ConfigurationError(ValueError):
    """Invalid or unknown configuration value."""


class ShapeError(ValueError):
    """Tensor shape does not match what an operation requires."""


class DataError(RuntimeError):
    """Dataset missing, malformed, or failed validation."""


class UnusablePairError(RuntimeError):
    """A training pair has no valid source pixels."""


class NumericalError(RuntimeError):
    """Loss or gradients became non-finite during optimization."""
