"""Class text prototypes: per-template unit columns plus their averaged bank.

A bank stores one unit-norm d-vector per (class, template) pair together with
the per-class average over templates, re-normalized. Zero-shot prediction is
the temperature softmax of cosine similarities against the averaged columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidTemperature,
    ShapeMismatch,
    ZeroVector,
)
from .ot_assign import SimilarityMatrix

# Standard prompt ensemble used for vision-language class names; the
# placeholder {} is substituted with the class name.
DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "itap of a {}",
    "a bad photo of the {}",
    "a origami {}",
    "a photo of the large {}",
    "a {} in a video game",
    "art of the {}",
    "a photo of the small {}",
)

_ZERO_NORM_TOL = 1e-12


@dataclass(frozen=True)
class PrototypeBank:
    """d x K x M per-template unit columns and the d x K averaged bank."""

    per_template: np.ndarray
    averaged: np.ndarray
    template_names: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.per_template.shape[0]

    @property
    def n_classes(self) -> int:
        return self.per_template.shape[1]

    @property
    def n_templates(self) -> int:
        return self.per_template.shape[2]


def _unit_columns(mat: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=0)
    bad = norms < _ZERO_NORM_TOL
    if bad.any():
        idx = tuple(np.argwhere(bad)[0])
        raise ZeroVector(f"{what} column {idx} has norm below {_ZERO_NORM_TOL}")
    return mat / norms


def build_bank(per_template, template_names=None) -> PrototypeBank:
    """Normalize per-template columns, average over templates, re-normalize.

    per_template: array-like of shape (d, K, M) with K >= 2 and M >= 1. Each
    (class, template) column is normalized independently before averaging, so
    templates contribute directions, not magnitudes.
    """
    raw = np.asarray(per_template, dtype=np.float64)
    if raw.ndim != 3:
        raise ShapeMismatch(f"per-template prototypes must be (d, K, M), got {raw.shape}")
    d, n_classes, n_templates = raw.shape
    if n_classes < 2:
        raise ShapeMismatch(f"need at least 2 classes, got {n_classes}")
    if n_templates < 1:
        raise ShapeMismatch(f"need at least 1 template, got {n_templates}")
    if not np.isfinite(raw).all():
        raise ShapeMismatch("prototype entries must be finite")

    flat = _unit_columns(raw.reshape(d, n_classes * n_templates), "prototype")
    unit = flat.reshape(d, n_classes, n_templates)
    averaged = _unit_columns(unit.mean(axis=2), "averaged prototype")

    if template_names is None:
        if n_templates <= len(DEFAULT_TEMPLATES):
            template_names = DEFAULT_TEMPLATES[:n_templates]
        else:
            template_names = tuple(f"template_{i}" for i in range(n_templates))
    template_names = tuple(template_names)
    if len(template_names) != n_templates:
        raise ShapeMismatch(
            f"{len(template_names)} template names for {n_templates} templates"
        )

    unit = unit.copy()
    unit.flags.writeable = False
    averaged.flags.writeable = False
    return PrototypeBank(per_template=unit, averaged=averaged, template_names=template_names)


def subset_bank(bank: PrototypeBank, n_templates: int) -> PrototypeBank:
    """Bank restricted to the first n_templates templates, re-averaged."""
    if not (1 <= n_templates <= bank.n_templates):
        raise IndexOutOfRange(
            f"template count {n_templates} outside [1, {bank.n_templates}]"
        )
    return build_bank(
        bank.per_template[:, :, :n_templates],
        template_names=bank.template_names[:n_templates],
    )


def _embedding_columns(z, dim: int) -> np.ndarray:
    # Accepts a raw (d, B) array or anything carrying one in a .z attribute.
    arr = np.asarray(getattr(z, "z", z), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != dim:
        raise ShapeMismatch(f"embeddings must be ({dim}, B), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeMismatch("embedding entries must be finite")
    return arr


def similarity(bank: PrototypeBank, template_index: int | None, z) -> SimilarityMatrix:
    """Cosine similarities T^T Z for one template, or the averaged bank.

    template_index selects a template column set; None selects the averaged
    bank. Inputs are assumed unit-norm (both prototypes and embeddings are
    produced normalized), so the plain inner product is the cosine.
    """
    arr = _embedding_columns(z, bank.dim)
    if template_index is None:
        basis = bank.averaged
    else:
        if not isinstance(template_index, (int, np.integer)):
            raise IndexOutOfRange(f"template index must be an int, got {template_index!r}")
        if not (0 <= template_index < bank.n_templates):
            raise IndexOutOfRange(
                f"template index {template_index} outside [0, {bank.n_templates})"
            )
        basis = bank.per_template[:, :, template_index]
    return SimilarityMatrix(basis.T @ arr)


@dataclass(frozen=True)
class PredictionMatrix:
    """K x B column-stochastic soft predictions."""

    p: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.p, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch(f"predictions must be 2-d, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeMismatch("prediction entries must be finite")
        if (arr < 0).any() or (arr > 1).any():
            raise ShapeMismatch("prediction entries must lie in [0, 1]")
        col_err = np.max(np.abs(arr.sum(axis=0) - 1.0))
        if col_err > 1e-9:
            raise ShapeMismatch(f"prediction columns must sum to 1 (max deviation {col_err:.3e})")
        object.__setattr__(self, "p", arr)


def softmax_columns(scores: np.ndarray) -> np.ndarray:
    """Column-wise softmax, shifted by the column max for stability."""
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def predict(bank: PrototypeBank, z, tau: float) -> PredictionMatrix:
    """Zero-shot soft predictions: softmax of averaged-bank cosines over tau."""
    if not (isinstance(tau, (int, float)) and math.isfinite(tau)) or tau <= 0:
        raise InvalidTemperature(f"temperature must be finite and > 0, got {tau!r}")
    sim = similarity(bank, None, z)
    return PredictionMatrix(softmax_columns(sim.values / tau))
