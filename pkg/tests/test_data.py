import struct

import numpy as np
import pytest

from otta import adapt, data, encoder, prototypes
from otta.errors import InvalidSpec, ParseError, ShapeMismatch


def _f32(rng, shape):
    # Values already representable in float32 so roundtrips compare bit-exact.
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def test_minimal_file_is_36_bytes(tmp_path):
    path = tmp_path / "tiny.bin"
    data.write_embedding_file(path, np.array([[1.5], [-2.0]]))
    blob = path.read_bytes()
    assert len(blob) == 36
    assert blob[:4] == b"OTEB"
    raw = data.read_embedding_file_raw(path)
    assert raw.d == 2 and raw.n_items == 1
    assert raw.prototypes is None and raw.labels is None
    np.testing.assert_array_equal(raw.items, [[1.5], [-2.0]])


def test_full_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    items = _f32(rng, (6, 11))
    protos = _f32(rng, (6, 3, 2))
    labels = rng.integers(0, 3, size=11)
    path = tmp_path / "full.bin"
    data.write_embedding_file(path, items, prototypes_raw=protos, labels=labels)
    bank, got_items, got_labels = data.read_embedding_file(path)
    np.testing.assert_array_equal(got_items, items)
    np.testing.assert_array_equal(got_labels, labels)
    want_bank = prototypes.build_bank(protos)
    np.testing.assert_array_equal(bank.averaged, want_bank.averaged)
    np.testing.assert_array_equal(bank.per_template, want_bank.per_template)


def test_labels_without_prototypes_need_class_count(tmp_path):
    rng = np.random.default_rng(1)
    items = _f32(rng, (4, 5))
    labels = np.array([0, 1, 2, 1, 0])
    path = tmp_path / "lab.bin"
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, items, labels=labels)
    data.write_embedding_file(path, items, labels=labels, n_classes=3)
    raw = data.read_embedding_file_raw(path)
    assert raw.n_classes == 3
    np.testing.assert_array_equal(raw.labels, labels)


def test_writer_validation(tmp_path):
    path = tmp_path / "bad.bin"
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, np.zeros(4))
    bad = np.zeros((2, 3))
    bad[0, 0] = np.inf
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, bad)
    items = np.zeros((2, 3))
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, items, prototypes_raw=np.zeros((3, 2, 1)))
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, items, labels=np.array([0, 5, 0]), n_classes=3)
    with pytest.raises(ShapeMismatch):
        data.write_embedding_file(path, items, labels=np.array([0, 1]), n_classes=3)


def _header(magic=b"OTEB", version=1, d=2, n=1, k=0, m=0, flags=0):
    return struct.pack("<4sIIIIII", magic, version, d, n, k, m, flags)


def test_parse_errors_on_malformed_headers(tmp_path):
    path = tmp_path / "mal.bin"
    cases = [
        _header()[:20],
        _header(magic=b"XTEB") + b"\x00" * 8,
        _header(version=2) + b"\x00" * 8,
        _header(d=0) + b"\x00" * 8,
        _header(n=0) + b"\x00" * 8,
        _header(flags=4) + b"\x00" * 8,
        _header(flags=data.FLAG_PROTOTYPES, k=1, m=1) + b"\x00" * 16,
        _header(flags=data.FLAG_LABELS, k=0) + b"\x00" * 12,
    ]
    for blob in cases:
        path.write_bytes(blob)
        with pytest.raises(ParseError):
            data.read_embedding_file_raw(path)


def test_parse_errors_on_bad_payloads(tmp_path):
    path = tmp_path / "pay.bin"
    path.write_bytes(_header() + b"\x00" * 4)
    with pytest.raises(ParseError, match="truncated"):
        data.read_embedding_file_raw(path)
    path.write_bytes(_header() + b"\x00" * 12)
    with pytest.raises(ParseError, match="trailing"):
        data.read_embedding_file_raw(path)
    nan_payload = np.array([np.nan, 0.0], dtype="<f4").tobytes()
    path.write_bytes(_header() + nan_payload)
    with pytest.raises(ParseError, match="non-finite"):
        data.read_embedding_file_raw(path)
    labels_blob = np.array([7], dtype="<i4").tobytes()
    items_blob = np.zeros(2, dtype="<f4").tobytes()
    path.write_bytes(_header(k=3, flags=data.FLAG_LABELS) + items_blob + labels_blob)
    with pytest.raises(ParseError, match="outside"):
        data.read_embedding_file_raw(path)


def test_prototype_block_layout(tmp_path):
    # Template-major then class-major then dimension, as documented.
    d, k, m = 2, 2, 2
    protos = np.arange(d * k * m, dtype=np.float64).reshape(d, k, m)
    path = tmp_path / "layout.bin"
    data.write_embedding_file(path, np.zeros((d, 1)), prototypes_raw=protos)
    blob = path.read_bytes()
    stored = np.frombuffer(blob, dtype="<f4", count=d * k * m, offset=28)
    want = np.transpose(protos, (2, 1, 0)).reshape(-1)
    np.testing.assert_array_equal(stored, want)
    raw = data.read_embedding_file_raw(path)
    np.testing.assert_array_equal(raw.prototypes, protos)


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(d=1)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(n_classes=1)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(n_templates=0)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(n_per_class=0)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(template_jitter=-0.1)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(shift_kind="blur")
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(severity=1.5)
    with pytest.raises(InvalidSpec):
        data.SyntheticShiftSpec(dominant_share=1.0)
    with pytest.raises(InvalidSpec):
        data.generate_synthetic(data.SyntheticShiftSpec(), batch_size=0)


def test_reference_encoder_dims():
    spec = data.SyntheticShiftSpec(d=16)
    enc_spec = data.toy_encoder_spec_for(spec)
    assert (enc_spec.d_in, enc_spec.d_hidden, enc_spec.d_out) == (16, 32, 16)
    assert enc_spec.layers == 1


def test_generation_is_deterministic():
    spec = data.SyntheticShiftSpec(d=8, n_classes=3, n_templates=2, n_per_class=20)
    a = data.generate_synthetic(spec, batch_size=10)
    b = data.generate_synthetic(spec, batch_size=10)
    assert a.bank.averaged.tobytes() == b.bank.averaged.tobytes()
    for (xa, la), (xb, lb) in zip(a.batches, b.batches):
        assert xa.tobytes() == xb.tobytes()
        assert la.tobytes() == lb.tobytes()


def test_batching_drops_remainder():
    spec = data.SyntheticShiftSpec(d=8, n_classes=3, n_templates=2, n_per_class=20)
    scen = data.generate_synthetic(spec, batch_size=7)
    assert len(scen.batches) == 60 // 7
    for x, labels in scen.batches:
        assert x.shape == (8, 7) and labels.shape == (7,)


def test_stratified_batches_balance_classes():
    # The within-one guarantee applies when batch size is a multiple of K.
    spec = data.SyntheticShiftSpec(d=8, n_classes=5, n_templates=2, n_per_class=30)
    scen = data.generate_synthetic(spec, batch_size=25)
    assert len(scen.batches) == 6
    for _, labels in scen.batches:
        counts = np.bincount(labels, minlength=5)
        assert np.all(np.abs(counts - 5) <= 1)
    # Off-multiple batches can straddle two partial rounds, never more.
    ragged = data.generate_synthetic(spec, batch_size=23)
    for _, labels in ragged.batches:
        counts = np.bincount(labels, minlength=5)
        assert counts.max() - counts.min() <= 2


def test_dominant_share_skews_counts():
    spec = data.SyntheticShiftSpec(
        d=8, n_classes=4, n_templates=2, n_per_class=50, dominant_share=0.7
    )
    scen = data.generate_synthetic(spec, batch_size=200)
    labels = np.concatenate([lab for _, lab in scen.batches])
    counts = np.bincount(labels, minlength=4)
    assert counts[0] > counts[1:].max() * 2
    with pytest.raises(InvalidSpec):
        data.generate_synthetic(
            data.SyntheticShiftSpec(
                d=8, n_classes=5, n_templates=1, n_per_class=2, dominant_share=0.95
            )
        )


def test_mean_shift_is_a_constant_offset():
    base = dict(d=8, n_classes=3, n_templates=2, n_per_class=20, seed=5)
    clean = data.generate_synthetic(
        data.SyntheticShiftSpec(shift_kind=data.SHIFT_MEAN, severity=0.0, **base), batch_size=60
    )
    shifted = data.generate_synthetic(
        data.SyntheticShiftSpec(shift_kind=data.SHIFT_MEAN, severity=0.6, **base), batch_size=60
    )
    diff = shifted.batches[0][0] - clean.batches[0][0]
    assert np.abs(diff - diff[:, :1]).max() < 1e-12
    assert np.linalg.norm(diff[:, 0]) > 0.1


def test_rotation_preserves_geometry():
    base = dict(d=8, n_classes=3, n_templates=2, n_per_class=20, seed=5)
    clean = data.generate_synthetic(
        data.SyntheticShiftSpec(shift_kind=data.SHIFT_ROTATION, severity=0.0, **base), batch_size=60
    )
    rotated = data.generate_synthetic(
        data.SyntheticShiftSpec(shift_kind=data.SHIFT_ROTATION, severity=0.5, **base), batch_size=60
    )
    xc = clean.batches[0][0]
    xr = rotated.batches[0][0]
    np.testing.assert_allclose(xr.T @ xr, xc.T @ xc, atol=1e-10)
    assert np.linalg.norm(xr - xc) > 0.1


def test_feature_mask_zeroes_rows():
    spec = data.SyntheticShiftSpec(
        d=10, n_classes=3, n_templates=2, n_per_class=20, shift_kind=data.SHIFT_MASK, severity=0.6
    )
    scen = data.generate_synthetic(spec, batch_size=60)
    x = np.concatenate([b for b, _ in scen.batches], axis=1)
    zero_rows = int(np.sum(np.all(x == 0.0, axis=1)))
    assert zero_rows == 6


def test_noiseless_unshifted_stream_is_perfect():
    spec = data.SyntheticShiftSpec(
        d=16, n_classes=5, n_templates=2, n_per_class=40,
        sample_noise=0.0, shift_kind=data.SHIFT_NONE, severity=0.0,
    )
    scen = data.generate_synthetic(spec, batch_size=50)
    state = adapt.fresh_state(scen.encoder)
    cfg = adapt.AdaptConfig(variant=adapt.VARIANT_ZERO_SHOT)
    stream = adapt.run_stream(state, scen.bank, scen.batches, cfg)
    assert stream.accuracy == 100.0


def test_default_geometry_is_near_separable():
    # d=32, K=10, sigma 0.1, no shift: 10k samples stay above 95% zero-shot.
    spec = data.SyntheticShiftSpec(n_per_class=1000, shift_kind=data.SHIFT_NONE, severity=0.0)
    scen = data.generate_synthetic(spec, batch_size=500)
    state = adapt.fresh_state(scen.encoder)
    cfg = adapt.AdaptConfig(variant=adapt.VARIANT_ZERO_SHOT)
    stream = adapt.run_stream(state, scen.bank, scen.batches, cfg)
    assert stream.accuracy > 95.0


def test_embed_scenario_matches_stream():
    spec = data.SyntheticShiftSpec(d=8, n_classes=3, n_templates=2, n_per_class=20)
    scen = data.generate_synthetic(spec, batch_size=30)
    z, labels = data.embed_scenario(scen)
    assert z.shape == (8, 60) and labels.shape == (60,)
    np.testing.assert_allclose(np.linalg.norm(z, axis=0), 1.0, atol=1e-12)
    reference = encoder.reset_state(scen.encoder)
    want = encoder.forward(scen.encoder, reference, scen.batches[0][0]).z
    np.testing.assert_array_equal(z[:, :30], want)
