"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or command-line usage."""


class DataError(RuntimeError):
    """Malformed, inconsistent, or unreadable input data."""


class ModelFormatError(DataError):
    """Model file is truncated, corrupted, or has an unsupported version."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a usable result."""
