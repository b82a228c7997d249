"""Exception hierarchy shared across the package."""


class AvlabError(Exception):
    """Base class for all package errors."""


class DimensionError(AvlabError):
    """Array shapes are incompatible for the requested operation."""


class DomainError(AvlabError):
    """Input value outside the mathematical domain (e.g. log of a non-positive)."""


class NumericError(AvlabError):
    """Non-finite value where a finite one is required."""


class ContractError(AvlabError):
    """A caller violated an operation's precondition."""


class ConfigError(AvlabError):
    """Invalid configuration value or key. CLI exit code 1."""


class DataError(AvlabError):
    """Dataset or file content problem. CLI exit code 2."""


class FormatError(DataError):
    """Base class for binary container violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """Container format version is not supported."""


class ChecksumError(FormatError):
    """Payload CRC does not match the stored checksum."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was complete."""
