import numpy as np
import pytest

from export_clip import cli
from export_clip.errors import DatasetUnavailable, ExportError
from export_clip.export import ExportSpec, export
from export_clip.providers import CIFAR10_CLASSES, FakeClipProvider

from otta import adapt, data as engine_data


def _fake_export(tmp_path, **provider_kw):
    provider = FakeClipProvider(**provider_kw)
    spec = ExportSpec(dataset="cifar10-test", model="ViT-B-32")
    path = tmp_path / "fake.bin"
    return export(spec, provider, str(path)), path


def test_fake_export_header_counts(tmp_path):
    result, path = _fake_export(tmp_path, dim=32, n_per_class=20)
    raw = engine_data.read_embedding_file_raw(path)
    assert (raw.d, raw.n_items, raw.n_classes, raw.n_templates) == (32, 200, 10, 8)
    assert result.bytes_written == path.stat().st_size
    assert (result.dim, result.n_items) == (32, 200)
    assert (result.n_classes, result.n_templates) == (10, 8)


def test_exported_columns_are_unit_norm(tmp_path):
    _, path = _fake_export(tmp_path, dim=24, n_per_class=10)
    raw = engine_data.read_embedding_file_raw(path)
    item_norms = np.linalg.norm(raw.items, axis=0)
    assert np.abs(item_norms - 1.0).max() < 1e-5
    proto_norms = np.linalg.norm(raw.prototypes, axis=0)
    assert np.abs(proto_norms - 1.0).max() < 1e-5


def test_export_is_deterministic(tmp_path):
    _, first = _fake_export(tmp_path, seed=7)
    second_dir = tmp_path / "again"
    second_dir.mkdir()
    _, second = _fake_export(second_dir, seed=7)
    assert first.read_bytes() == second.read_bytes()
    third_dir = tmp_path / "other"
    third_dir.mkdir()
    _, third = _fake_export(third_dir, seed=8)
    assert first.read_bytes() != third.read_bytes()


def _stream(raw, width):
    for start in range(0, raw.n_items, width):
        z = raw.items[:, start : start + width]
        lab = raw.labels[start : start + width]
        yield z, lab


def test_engine_consumes_fake_export_zero_shot(tmp_path):
    _, path = _fake_export(tmp_path, dim=32, n_per_class=50, noise=0.1)
    bank, items, labels = engine_data.read_embedding_file(path)
    assert bank.per_template.shape == (32, 10, 8)
    raw = engine_data.read_embedding_file_raw(path)
    cfg = adapt.AdaptConfig(variant=adapt.VARIANT_ZERO_SHOT)
    res = adapt.run_stream_embedded(bank, _stream(raw, 100), cfg)
    # Clusters sit on the averaged prompt directions, so nearest
    # prototype recovers nearly every label at this noise level.
    assert res.accuracy > 95.0


def test_engine_consumes_fake_export_training_free(tmp_path):
    _, path = _fake_export(tmp_path, dim=32, n_per_class=50, noise=0.1)
    bank, _, _ = engine_data.read_embedding_file(path)
    raw = engine_data.read_embedding_file_raw(path)
    cfg = adapt.AdaptConfig(variant=adapt.VARIANT_TRAINING_FREE)
    res = adapt.run_stream_embedded(bank, _stream(raw, 100), cfg)
    assert res.accuracy > 95.0


def test_spec_validation():
    with pytest.raises(ExportError):
        ExportSpec(dataset="")
    with pytest.raises(ExportError):
        ExportSpec(model="")
    with pytest.raises(Exception):
        ExportSpec(templates=("no slot",))
    with pytest.raises(Exception):
        ExportSpec(templates=())


class _BrokenTextProvider(FakeClipProvider):
    def text_features(self, prompts, device="cpu"):
        return np.zeros((4, len(prompts) + 1))


class _ZeroColumnProvider(FakeClipProvider):
    def image_features(self, dataset, device="cpu"):
        items, labels = super().image_features(dataset, device)
        items[:, 0] = 0.0
        return items, labels


class _RaggedDimProvider(FakeClipProvider):
    def text_features(self, prompts, device="cpu"):
        feats = super().text_features(prompts, device)
        if prompts[0].startswith("itap"):
            return np.vstack([feats, feats[:1]])
        return feats


def test_export_rejects_backend_shape_drift(tmp_path):
    spec = ExportSpec()
    with pytest.raises(ExportError, match="shape"):
        export(spec, _BrokenTextProvider(), str(tmp_path / "x.bin"))
    with pytest.raises(ExportError, match="zero-norm"):
        export(spec, _ZeroColumnProvider(dim=8, n_per_class=2), str(tmp_path / "y.bin"))
    with pytest.raises(ExportError, match="dimension"):
        export(spec, _RaggedDimProvider(dim=8, n_per_class=2), str(tmp_path / "z.bin"))


def test_export_unwritable_path_is_an_export_error(tmp_path):
    spec = ExportSpec()
    with pytest.raises(ExportError, match="could not write"):
        export(spec, FakeClipProvider(dim=8, n_per_class=2), str(tmp_path / "no" / "dir.bin"))


def test_cli_fake_provider_writes_readable_file(tmp_path, capsys):
    out = tmp_path / "cli.bin"
    code = cli.main(
        [
            "--provider",
            "fake",
            "--out",
            str(out),
            "--fake-dim",
            "16",
            "--fake-per-class",
            "5",
        ]
    )
    assert code == 0
    line = capsys.readouterr().out.strip()
    fields = dict(pair.split("=", 1) for pair in line.split())
    assert fields["items"] == "50"
    assert fields["classes"] == "10"
    assert fields["templates"] == "8"
    raw = engine_data.read_embedding_file_raw(out)
    assert raw.n_items == 50
    assert len(CIFAR10_CLASSES) == raw.n_classes


def test_cli_custom_templates(tmp_path):
    out = tmp_path / "two.bin"
    code = cli.main(
        [
            "--provider",
            "fake",
            "--out",
            str(out),
            "--fake-per-class",
            "2",
            "--template",
            "a photo of a {}",
            "--template",
            "art of the {}",
        ]
    )
    assert code == 0
    assert engine_data.read_embedding_file_raw(out).n_templates == 2


def test_cli_usage_errors_exit_one(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["--out", str(tmp_path / "a.bin"), "--provider", "bogus"]) == 1
    assert (
        cli.main(
            [
                "--provider",
                "fake",
                "--out",
                str(tmp_path / "b.bin"),
                "--template",
                "missing slot",
            ]
        )
        == 1
    )
    assert (
        cli.main(
            ["--provider", "fake", "--out", str(tmp_path / "c.bin"), "--fake-dim", "1"]
        )
        == 1
    )
    capsys.readouterr()


def test_cli_runtime_errors_exit_two(tmp_path, capsys):
    code = cli.main(["--provider", "clip", "--dataset", "mnist", "--out", str(tmp_path / "d.bin")])
    assert code == 2
    assert "DatasetUnavailable" in capsys.readouterr().err


def test_cli_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    capsys.readouterr()


def test_clip_provider_rejects_unknown_dataset_before_loading():
    from export_clip.providers import ClipProvider

    with pytest.raises(DatasetUnavailable):
        ClipProvider().class_names("imagenet-val")
