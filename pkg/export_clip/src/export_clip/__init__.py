"""Standalone exporter producing OTEB embedding files from CLIP."""

from .errors import DatasetUnavailable, ExportError, ModelUnavailable
from .export import ExportResult, ExportSpec, export
from .format import pack_embedding_file, write_embedding_file
from .providers import ClipProvider, FakeClipProvider
from .templates import DEFAULT_TEMPLATES, InvalidTemplate

__all__ = [
    "ClipProvider",
    "DatasetUnavailable",
    "DEFAULT_TEMPLATES",
    "ExportError",
    "ExportResult",
    "ExportSpec",
    "FakeClipProvider",
    "InvalidTemplate",
    "ModelUnavailable",
    "export",
    "pack_embedding_file",
    "write_embedding_file",
]

__version__ = "0.1.0"
