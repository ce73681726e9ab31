"""deitfeat: frozen-transformer feature extraction to EFV1 files."""

from .extract import ExtractionConfig, extract, verify

__all__ = ["ExtractionConfig", "extract", "verify"]
__version__ = "0.1.0"
