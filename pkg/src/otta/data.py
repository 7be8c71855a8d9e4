"""Embedding file I/O and the synthetic shifted-mixture generator.

File format ("OTEB", version 1), all integers unsigned 32-bit little-endian:

    offset  size  field
    0       4     magic b"OTEB"
    4       4     version = 1
    8       4     d (embedding dimension)
    12      4     n_items
    16      4     K (classes)
    20      4     M (templates)
    24      4     flags: bit 0 = labels present, bit 1 = prototypes present
    28      ...   payload, little-endian float32 / int32:
                  [prototypes d*K*M f32, template-major, then class-major,
                   then dimension]  (only when flags bit 1)
                  [items d*n_items f32, item-major]
                  [labels n_items i32, values in [0, K)]  (only when flags bit 0)

The synthetic generator draws K class directions on the unit sphere of the
input space, images jittered copies of them through the reference toy encoder
to obtain per-template prototypes, and emits raw inputs x = direction +
Gaussian noise pushed through a distribution-shift operator. Prototypes are
built from unshifted directions on purpose: the shift is what adaptation is
asked to undo.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import encoder as enc_mod
from . import prototypes
from .errors import InvalidSpec, ParseError, ShapeMismatch

MAGIC = b"OTEB"
VERSION = 1
FLAG_LABELS = 1
FLAG_PROTOTYPES = 2
_HEADER = struct.Struct("<4sIIIIII")

SHIFT_NONE = "none"
SHIFT_MEAN = "mean_shift"
SHIFT_ROTATION = "rotation"
SHIFT_MASK = "feature_mask"
SHIFT_KINDS = (SHIFT_NONE, SHIFT_MEAN, SHIFT_ROTATION, SHIFT_MASK)


# ---------------------------------------------------------------------------
# binary format


def write_embedding_file(
    path,
    items,
    prototypes_raw=None,
    labels=None,
    n_classes: int | None = None,
    n_templates: int | None = None,
) -> None:
    """Serialize items (d, n), optional prototypes (d, K, M), optional labels.

    Floats are cast to little-endian float32; labels to int32. K and M are
    taken from the prototype block when present, else from the explicit
    arguments (required when labels need a class range), else stored as 0.
    """
    items_arr = np.asarray(items, dtype=np.float64)
    if items_arr.ndim != 2:
        raise ShapeMismatch(f"items must be (d, n), got {items_arr.shape}")
    if not np.isfinite(items_arr).all():
        raise ShapeMismatch("item entries must be finite")
    d, n_items = items_arr.shape

    flags = 0
    proto_arr = None
    if prototypes_raw is not None:
        proto_arr = np.asarray(prototypes_raw, dtype=np.float64)
        if proto_arr.ndim != 3 or proto_arr.shape[0] != d:
            raise ShapeMismatch(
                f"prototypes must be ({d}, K, M), got {proto_arr.shape}"
            )
        if not np.isfinite(proto_arr).all():
            raise ShapeMismatch("prototype entries must be finite")
        n_classes = proto_arr.shape[1]
        n_templates = proto_arr.shape[2]
        flags |= FLAG_PROTOTYPES

    labels_arr = None
    if labels is not None:
        labels_arr = np.asarray(labels)
        if labels_arr.ndim != 1 or labels_arr.shape[0] != n_items:
            raise ShapeMismatch(f"labels must be ({n_items},), got {labels_arr.shape}")
        if n_classes is None:
            raise ShapeMismatch("labels need an explicit class count when no prototypes are given")
        if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= n_classes):
            raise ShapeMismatch(f"labels must lie in [0, {n_classes})")
        flags |= FLAG_LABELS

    header = _HEADER.pack(
        MAGIC, VERSION, d, n_items, n_classes or 0, n_templates or 0, flags
    )
    chunks = [header]
    if proto_arr is not None:
        # template-major, then class-major, then dimension
        chunks.append(np.transpose(proto_arr, (2, 1, 0)).astype("<f4").tobytes())
    chunks.append(items_arr.T.astype("<f4").tobytes())
    if labels_arr is not None:
        chunks.append(labels_arr.astype("<i4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


@dataclass(frozen=True)
class RawEmbeddingFile:
    """Decoded blocks exactly as stored, float32/int32 widened to float64/int."""

    d: int
    n_items: int
    n_classes: int
    n_templates: int
    prototypes: np.ndarray | None  # (d, K, M)
    items: np.ndarray  # (d, n_items)
    labels: np.ndarray | None  # (n_items,)


def read_embedding_file_raw(path) -> RawEmbeddingFile:
    """Parse and validate a file without reinterpreting its contents."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ParseError("file shorter than the 28-byte header", offset=len(blob))
    magic, version, d, n_items, n_classes, n_templates, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}, expected {VERSION}", offset=4)
    if d < 1:
        raise ParseError("dimension must be >= 1", offset=8)
    if n_items < 1:
        raise ParseError("item count must be >= 1", offset=12)
    if flags & ~(FLAG_LABELS | FLAG_PROTOTYPES):
        raise ParseError(f"unknown flag bits {flags:#x}", offset=24)

    offset = _HEADER.size
    proto = None
    if flags & FLAG_PROTOTYPES:
        if n_classes < 2 or n_templates < 1:
            raise ParseError(
                f"prototype block needs K >= 2 and M >= 1, header says K={n_classes} M={n_templates}",
                offset=16,
            )
        nbytes = 4 * d * n_classes * n_templates
        if len(blob) < offset + nbytes:
            raise ParseError("prototype block truncated", offset=len(blob))
        flat = np.frombuffer(blob, dtype="<f4", count=d * n_classes * n_templates, offset=offset)
        proto = np.ascontiguousarray(
            np.transpose(flat.reshape(n_templates, n_classes, d), (2, 1, 0))
        ).astype(np.float64)
        offset += nbytes

    nbytes = 4 * d * n_items
    if len(blob) < offset + nbytes:
        raise ParseError("item block truncated", offset=len(blob))
    items = (
        np.frombuffer(blob, dtype="<f4", count=d * n_items, offset=offset)
        .reshape(n_items, d)
        .T.astype(np.float64)
    )
    offset += nbytes

    labels = None
    if flags & FLAG_LABELS:
        if n_classes < 1:
            raise ParseError("labels present but header K = 0", offset=16)
        nbytes = 4 * n_items
        if len(blob) < offset + nbytes:
            raise ParseError("label block truncated", offset=len(blob))
        labels = np.frombuffer(blob, dtype="<i4", count=n_items, offset=offset).astype(np.int64)
        offset += nbytes
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ParseError(f"labels outside [0, {n_classes})", offset=offset - nbytes)

    if offset != len(blob):
        raise ParseError(
            f"file has {len(blob) - offset} trailing bytes beyond the declared blocks",
            offset=offset,
        )
    if not np.isfinite(items).all() or (proto is not None and not np.isfinite(proto).all()):
        raise ParseError("float payload contains non-finite values", offset=_HEADER.size)
    return RawEmbeddingFile(
        d=d,
        n_items=n_items,
        n_classes=n_classes,
        n_templates=n_templates,
        prototypes=proto,
        items=items,
        labels=labels,
    )


def read_embedding_file(path):
    """Read a file into (PrototypeBank | None, items (d, n), labels | None)."""
    raw = read_embedding_file_raw(path)
    bank = None
    if raw.prototypes is not None:
        bank = prototypes.build_bank(raw.prototypes)
    return bank, raw.items, raw.labels


# ---------------------------------------------------------------------------
# synthetic scenarios


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """A labeled mixture on the sphere plus a controlled distribution shift.

    dominant_share > 0 skews the class frequencies so one cluster dominates
    the stream (and disables stratified batching); it exists to stress
    collapse behavior, not to model anything.
    """

    d: int = 32
    n_classes: int = 10
    n_templates: int = 8
    n_per_class: int = 256
    template_jitter: float = 0.1
    sample_noise: float = 0.1
    shift_kind: str = SHIFT_MEAN
    severity: float = 0.6
    seed: int = 0
    dominant_share: float = 0.0

    def __post_init__(self):
        if self.d < 2:
            raise InvalidSpec(f"d must be >= 2, got {self.d}")
        if self.n_classes < 2:
            raise InvalidSpec(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_templates < 1:
            raise InvalidSpec(f"n_templates must be >= 1, got {self.n_templates}")
        if self.n_per_class < 1:
            raise InvalidSpec(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.template_jitter < 0 or self.sample_noise < 0:
            raise InvalidSpec("jitter and noise scales must be >= 0")
        if self.shift_kind not in SHIFT_KINDS:
            raise InvalidSpec(f"shift_kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}")
        if not (0.0 <= self.severity <= 1.0):
            raise InvalidSpec(f"severity must lie in [0, 1], got {self.severity}")
        if not (0.0 <= self.dominant_share < 1.0):
            raise InvalidSpec(f"dominant_share must lie in [0, 1), got {self.dominant_share}")


def toy_encoder_spec_for(spec: SyntheticShiftSpec) -> enc_mod.ToyEncoderSpec:
    """The scenario's reference encoder: input dim d, hidden 2d, output d.

    One block keeps the clean-data geometry nearly linear, so the noiseless
    mixture stays separable after encoding (the severity-0 stream must score
    near-perfect zero-shot accuracy).
    """
    return enc_mod.ToyEncoderSpec(
        d_in=spec.d,
        d_hidden=2 * spec.d,
        d_out=spec.d,
        layers=1,
        seed=spec.seed + 7919,
    )


def _shift_operator(spec: SyntheticShiftSpec, rng: np.random.Generator):
    """Returns f(X) applying the configured shift at the configured severity."""
    if spec.shift_kind == SHIFT_NONE or spec.severity == 0.0:
        return lambda x: x
    if spec.shift_kind == SHIFT_MEAN:
        # Unnormalized Gaussian, so the offset norm grows like severity*sqrt(d)
        # and the shift dominates sample noise at high severity.
        offset = spec.severity * rng.standard_normal(spec.d)
        return lambda x: x + offset[:, None]
    if spec.shift_kind == SHIFT_ROTATION:
        gauss = rng.standard_normal((spec.d, spec.d))
        skew = (gauss - gauss.T) / 2.0
        skew /= np.linalg.norm(skew, 2)
        # Cayley transform of a scaled skew map: orthogonal for every
        # severity, identity at severity 0.
        eye = np.eye(spec.d)
        scaled = spec.severity * skew
        rot = np.linalg.solve(eye + scaled, eye - scaled)
        return lambda x: rot @ x
    masked = rng.choice(spec.d, size=int(math.floor(spec.severity * spec.d)), replace=False)
    def mask(x):
        out = x.copy()
        out[masked, :] = 0.0
        return out
    return mask


def _class_counts(spec: SyntheticShiftSpec) -> np.ndarray:
    total = spec.n_classes * spec.n_per_class
    if spec.dominant_share == 0.0:
        return np.full(spec.n_classes, spec.n_per_class, dtype=int)
    counts = np.full(
        spec.n_classes,
        int(round(total * (1.0 - spec.dominant_share) / (spec.n_classes - 1))),
        dtype=int,
    )
    counts[0] = total - counts[1:].sum()
    if counts.min() < 1:
        raise InvalidSpec("dominant_share leaves some class with no samples")
    return counts


@dataclass(frozen=True)
class SyntheticScenario:
    """Everything a run needs: bank, raw input stream, reference encoder."""

    bank: prototypes.PrototypeBank
    batches: tuple[tuple[np.ndarray, np.ndarray], ...]
    encoder: enc_mod.ToyEncoder
    spec: SyntheticShiftSpec


def generate_synthetic(
    spec: SyntheticShiftSpec, batch_size: int = 128, stratified: bool = True
) -> SyntheticScenario:
    """Build the prototype bank and the shifted input stream.

    Prototypes are the reference-encoder images of jittered class directions,
    normalized per template and averaged by build_bank. Samples are class
    directions plus isotropic noise, pushed through the shift operator, and
    batched; stratified batching keeps per-batch class counts within one of
    B/K whenever the batch size is a multiple of the class count
    (dominant_share forces plain shuffling instead).
    """
    if batch_size < 1:
        raise InvalidSpec(f"batch_size must be >= 1, got {batch_size}")
    root = np.random.SeedSequence(spec.seed)
    s_dirs, s_jit, s_samp, s_shift, s_perm = (np.random.default_rng(s) for s in root.spawn(5))

    directions = s_dirs.standard_normal((spec.d, spec.n_classes))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)

    encoder = enc_mod.ToyEncoder(toy_encoder_spec_for(spec))
    reference = enc_mod.reset_state(encoder)

    jitter = s_jit.standard_normal((spec.d, spec.n_classes, spec.n_templates))
    anchors = directions[:, :, None] + spec.template_jitter * jitter
    anchors /= np.linalg.norm(anchors, axis=0, keepdims=True)
    images = enc_mod.forward(
        encoder, reference, anchors.reshape(spec.d, -1)
    ).z.reshape(spec.d, spec.n_classes, spec.n_templates)
    names = None
    if spec.n_templates <= len(prototypes.DEFAULT_TEMPLATES):
        names = prototypes.DEFAULT_TEMPLATES[: spec.n_templates]
    bank = prototypes.build_bank(images, template_names=names)

    counts = _class_counts(spec)
    labels = np.repeat(np.arange(spec.n_classes), counts)
    x = directions[:, labels] + spec.sample_noise * s_samp.standard_normal((spec.d, labels.size))
    x = _shift_operator(spec, s_shift)(x)

    if stratified and spec.dominant_share == 0.0:
        # Round-robin over independently shuffled class pools: consecutive
        # windows of K samples hold one sample of each class.
        pools = []
        start = 0
        for count in counts:
            pool = np.arange(start, start + count)
            s_perm.shuffle(pool)
            pools.append(pool)
            start += count
        order = np.stack(pools, axis=1).reshape(-1)
        rounds = order.reshape(spec.n_per_class, spec.n_classes)
        for row in rounds:
            s_perm.shuffle(row)
        order = rounds.reshape(-1)
    else:
        order = s_perm.permutation(labels.size)

    x = x[:, order]
    labels = labels[order]
    n_batches = labels.size // batch_size
    batches = tuple(
        (
            x[:, i * batch_size : (i + 1) * batch_size],
            labels[i * batch_size : (i + 1) * batch_size],
        )
        for i in range(n_batches)
    )
    return SyntheticScenario(bank=bank, batches=batches, encoder=encoder, spec=spec)


def embed_scenario(scenario: SyntheticScenario) -> tuple[np.ndarray, np.ndarray]:
    """Reference-encoder embeddings of the whole stream, with labels."""
    reference = enc_mod.reset_state(scenario.encoder)
    xs = np.concatenate([x for x, _ in scenario.batches], axis=1)
    labels = np.concatenate([lab for _, lab in scenario.batches])
    z = enc_mod.forward(scenario.encoder, reference, xs).z
    return z, labels
