"""Exception types shared across the package.

Exit-code mapping used by the CLI: ConfigError and ParseError map to 2,
NumericalError to 3, I/O failures (OSError) to 4.
"""


class BilayerError(Exception):
    """Base class for all package errors."""


class ConfigError(BilayerError):
    """Invalid or inconsistent configuration."""


class ParseError(BilayerError):
    """Malformed on-disk record. Carries the offending file and line."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f" ({path}" + (f":{line}" if line is not None else "") + ")"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class IntegrityError(BilayerError):
    """Dataset contents violate a structural invariant."""


class NumericalError(BilayerError):
    """Non-finite value encountered during training or inference."""


class ContainerError(BilayerError):
    """Bad magic, version, or truncated tensor container."""
