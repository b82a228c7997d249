"""Adapter from real videos to the detector's feature containers."""

from .errors import EncoderUnavailable, ExtractError, MediaError
from .extract import (
    LONG_FORM_STRIDE,
    SHORT_FORM_STRIDE,
    ExtractionJob,
    ExtractResult,
    embed_class_labels,
    extract,
    sample_indices,
)

__version__ = "0.1.0"

__all__ = [
    "EncoderUnavailable",
    "ExtractError",
    "MediaError",
    "ExtractionJob",
    "ExtractResult",
    "extract",
    "embed_class_labels",
    "sample_indices",
    "LONG_FORM_STRIDE",
    "SHORT_FORM_STRIDE",
    "__version__",
]
