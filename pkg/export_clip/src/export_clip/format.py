"""Writer for the OTEB embedding interchange format.

The layout is fixed by the consuming engine and is reproduced here
independently so the exporter has no import-time dependency on it:

* 28-byte header, little endian: magic ``OTEB``, version ``1``, then
  ``d``, ``n_items``, ``n_classes``, ``n_templates``, ``flags`` as u32.
  Flag bit 0 marks a trailing label block, bit 1 a prototype block.
* Prototype block: float32, template-major, then class-major, then
  dimension. One template's classes are contiguous.
* Item block: float32, one item's ``d`` components contiguous.
* Label block: int32, one entry per item.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"OTEB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

FLAG_LABELS = 1
FLAG_PROTOTYPES = 2


class WriteError(ValueError):
    """Raised when arrays handed to the writer violate the format."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise WriteError(msg)


def pack_embedding_file(
    items: np.ndarray,
    prototypes: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> bytes:
    """Serialize embeddings to OTEB bytes.

    ``items`` is (d, n_items); ``prototypes`` is (d, n_classes,
    n_templates) or None; ``labels`` is (n_items,) int or None.
    """
    items = np.asarray(items)
    _require(items.ndim == 2, "items must be a (d, n_items) matrix")
    d, n_items = items.shape
    _require(d >= 1, "need at least one feature dimension")
    _require(np.isfinite(items).all(), "items contain non-finite values")

    n_classes = 0
    n_templates = 0
    flags = 0
    blocks = []

    if prototypes is not None:
        prototypes = np.asarray(prototypes)
        _require(
            prototypes.ndim == 3 and prototypes.shape[0] == d,
            "prototypes must be (d, n_classes, n_templates) with matching d",
        )
        _, n_classes, n_templates = prototypes.shape
        _require(n_classes >= 2, "need at least 2 classes")
        _require(n_templates >= 1, "need at least 1 template")
        _require(np.isfinite(prototypes).all(), "prototypes contain non-finite values")
        flags |= FLAG_PROTOTYPES
        # Template-major, then class-major, then dimension.
        block = np.transpose(prototypes, (2, 1, 0)).astype("<f4").reshape(-1)
        blocks.append(block.tobytes())

    blocks.append(items.T.astype("<f4").reshape(-1).tobytes())

    if labels is not None:
        labels = np.asarray(labels)
        _require(
            labels.ndim == 1 and labels.shape[0] == n_items,
            "labels must be a flat vector with one entry per item",
        )
        _require(
            np.issubdtype(labels.dtype, np.integer),
            "labels must be integers",
        )
        _require(prototypes is not None, "labels need a prototype block for the class count")
        _require(
            bool((labels >= 0).all() and (labels < n_classes).all()),
            "labels out of range",
        )
        flags |= FLAG_LABELS
        blocks.append(labels.astype("<i4").tobytes())

    header = _HEADER.pack(MAGIC, VERSION, d, n_items, n_classes, n_templates, flags)
    return header + b"".join(blocks)


def write_embedding_file(
    path,
    items: np.ndarray,
    prototypes: np.ndarray | None = None,
    labels: np.ndarray | None = None,
) -> int:
    """Write OTEB bytes to ``path`` and return the byte count."""
    payload = pack_embedding_file(items, prototypes=prototypes, labels=labels)
    with open(path, "wb") as fh:
        fh.write(payload)
    return len(payload)
