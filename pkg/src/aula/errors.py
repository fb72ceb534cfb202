"""Base exception type shared across the package."""


class AulaError(Exception):
    """Root of all errors raised by this package."""
