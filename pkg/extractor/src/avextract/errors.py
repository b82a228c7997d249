class ExtractError(Exception):
    """Base class; also raised directly for bad job parameters."""


class MediaError(ExtractError):
    """Input video or audio cannot be decoded."""


class EncoderUnavailable(ExtractError):
    """No backend registered under the requested encoder identifier."""
