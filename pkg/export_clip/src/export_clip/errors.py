"""Error types shared across the exporter."""

from __future__ import annotations


class ExportError(RuntimeError):
    """Base class for failures while producing an embedding file."""


class ModelUnavailable(ExportError):
    """The requested vision-language model cannot be loaded here."""


class DatasetUnavailable(ExportError):
    """The requested dataset is not present in the local cache."""
