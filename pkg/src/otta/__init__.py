"""Test-time adaptation of frozen encoders via balanced optimal-transport pseudo-labels."""

from . import adapt, data, encoder, errors, experiments, ot_assign, prototypes

__all__ = [
    "adapt",
    "data",
    "encoder",
    "errors",
    "experiments",
    "ot_assign",
    "prototypes",
]

__version__ = "0.1.0"
