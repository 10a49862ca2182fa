"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class DataFormatError(ValueError):
    """An input file does not match its declared format."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient block contains NaN or Inf; message names the block."""


class RunAbortError(RuntimeError):
    """A run produced a non-finite loss and cannot continue."""
