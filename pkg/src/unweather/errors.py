"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad shape wiring, or incompatible sizes."""


class NumericError(RuntimeError):
    """Training produced a non-finite value; carries a diagnostic dump."""


class TeacherLoadError(RuntimeError):
    """A real teacher backbone could not be loaded from local files."""
