"""Export orchestration: prompts to prototypes to a serialized file."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import format as oteb
from . import templates as tpl
from .errors import ExportError

UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ExportSpec:
    """What to export and where.

    ``templates`` must each contain exactly one ``{}`` slot; every
    template becomes one prototype column group in the output file.
    """

    dataset: str = "cifar10-test"
    model: str = "ViT-B-32"
    templates: tuple[str, ...] = field(default=tpl.DEFAULT_TEMPLATES)
    device: str = "cpu"

    def __post_init__(self):
        if not self.dataset:
            raise ExportError("dataset id must be non-empty")
        if not self.model:
            raise ExportError("model id must be non-empty")
        object.__setattr__(self, "templates", tpl.check_templates(self.templates))


@dataclass(frozen=True)
class ExportResult:
    path: str
    bytes_written: int
    dim: int
    n_items: int
    n_classes: int
    n_templates: int


def _unit_columns(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise ExportError(f"{what} contain non-finite values")
    norms = np.linalg.norm(a.reshape(a.shape[0], -1), axis=0)
    if norms.min() <= 0.0:
        raise ExportError(f"{what} contain a zero-norm column")
    unit = a / norms.reshape((1,) + a.shape[1:])
    check = np.linalg.norm(unit.reshape(a.shape[0], -1), axis=0)
    if np.abs(check - 1.0).max() > UNIT_NORM_TOL:
        raise ExportError(f"{what} could not be normalized to unit length")
    return unit


def export(spec: ExportSpec, provider, out_path: str) -> ExportResult:
    """Run the full pipeline and write an OTEB file to ``out_path``.

    Text features are extracted once per template over all class names,
    image features once over the dataset.  Both sides are normalized to
    unit columns (within 1e-5) before serialization.
    """
    names = provider.class_names(spec.dataset)
    if len(names) < 2:
        raise ExportError("need at least 2 classes to export prototypes")

    per_template = []
    for template in spec.templates:
        prompts = tpl.prompts_for(template, names)
        feats = np.asarray(provider.text_features(prompts, spec.device), dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != len(names):
            raise ExportError(
                f"text backend returned shape {feats.shape}, wanted (d, {len(names)})"
            )
        per_template.append(_unit_columns(feats, "text features"))
    dims = {f.shape[0] for f in per_template}
    if len(dims) != 1:
        raise ExportError(f"templates disagree on feature dimension: {sorted(dims)}")
    prototypes = np.stack(per_template, axis=2)

    items, labels = provider.image_features(spec.dataset, spec.device)
    items = np.asarray(items, dtype=np.float64)
    if items.ndim != 2 or items.shape[0] != prototypes.shape[0]:
        raise ExportError(
            f"image backend returned shape {items.shape}, wanted ({prototypes.shape[0]}, n)"
        )
    if items.shape[1] < 1:
        raise ExportError("image backend returned no items")
    items = _unit_columns(items, "image features")
    labels = np.asarray(labels)

    try:
        n = oteb.write_embedding_file(out_path, items, prototypes=prototypes, labels=labels)
    except OSError as exc:
        raise ExportError(f"could not write {out_path}: {exc}") from exc

    return ExportResult(
        path=str(out_path),
        bytes_written=n,
        dim=int(items.shape[0]),
        n_items=int(items.shape[1]),
        n_classes=len(names),
        n_templates=len(spec.templates),
    )
