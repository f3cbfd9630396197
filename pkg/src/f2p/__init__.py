"""Flash/non-flash contactless fingerprint enhancement and embedding pipeline."""

__version__ = "0.1.0"
