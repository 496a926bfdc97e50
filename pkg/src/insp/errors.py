"""Exception hierarchy shared by every module.

Callers can catch ``InspError`` for anything raised deliberately by the
library; the subclasses map onto the CLI exit-code policy (usage and
format problems vs. numerical failures).
"""


class InspError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(InspError):
    """An argument violated a documented precondition."""


class CapabilityError(InspError):
    """The request is valid but outside what this build supports."""


class DivergenceError(InspError):
    """A training loop or gradient produced non-finite numbers."""


class ConditioningError(InspError):
    """A linear solve stayed rank-deficient beyond the damping floor."""

    def __init__(self, message: str, degree: int | None = None):
        super().__init__(message)
        self.degree = degree


class FileFormatError(InspError):
    """Base class for malformed binary or text inputs."""


class BadMagicError(FileFormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(FileFormatError):
    """The file's format version is not supported."""


class ChecksumError(FileFormatError):
    """The trailing checksum does not match the file contents."""


class TruncatedFileError(FileFormatError):
    """The payload ended before the declared length."""


class HeaderParseError(FileFormatError):
    """A text or binary header could not be parsed."""
