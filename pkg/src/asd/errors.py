"""Exception hierarchy shared by all modules."""


class AsdError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(AsdError):
    """Invalid configuration, shape mismatch, or contract violation."""


class DomainError(AsdError):
    """Argument outside its mathematical domain (t range, step index, ...)."""


class NumericError(AsdError):
    """Non-finite value where a finite one is required.

    `diagnostics` carries whatever context the raiser had (loss breakdown,
    offending segments, iteration number) for post-mortem dumps.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MissingInputError(AsdError):
    """A required upstream artifact (file) is absent."""
