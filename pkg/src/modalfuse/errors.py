"""Exception types shared across the package."""


class ModalfuseError(Exception):
    """Base class for all package errors."""


class ValidationError(ModalfuseError):
    """Input data violates a documented invariant."""


class ConfigError(ModalfuseError):
    """Configuration values are inconsistent (dimension mismatch, bad keys)."""


class NotFoundError(ModalfuseError):
    """A requested key is absent from a store or manifest."""


class CorruptionError(ModalfuseError):
    """Stored bytes fail an integrity check (CRC, magic, truncation)."""


class RecordParseError(ModalfuseError):
    """A line-delimited record could not be parsed.

    Carries the 1-based line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
