"""Adapter contract tests.

The emitted files are validated with the consumer package's own reader,
which is the whole point of the adapter: anything it writes must be
accepted unmodified on the other side of the CSV boundary.
"""

import numpy as np
import pytest

from backbone_adapter import (
    AdapterConfig,
    AdapterError,
    emit_predictions,
    read_image_manifest,
    stub_probabilities,
)
from backbone_adapter.cli import main
from pseudovote.core import read_predictions


IDS = [f"img{i:02d}" for i in range(10)]


@pytest.fixture()
def workspace(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    lines = ["image_id,path"]
    for i, item in enumerate(IDS):
        (images / f"{item}.png").write_bytes(b"\x89PNG" + bytes([i]))
        lines.append(f"{item},images/{item}.png")
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return tmp_path


def config_for(root, out_name="preds.csv", **overrides):
    return AdapterConfig(
        manifest=str(root / "manifest.csv"), out=str(root / out_name), **overrides
    )


def test_stub_output_validates_under_consumer_reader(workspace):
    count = emit_predictions(config_for(workspace))
    assert count == 10
    preds = read_predictions(workspace / "preds.csv")
    assert list(preds.ids) == IDS  # row order follows the manifest
    assert preds.num_classes == 3


def test_stub_runs_are_byte_identical(workspace):
    emit_predictions(config_for(workspace, "a.csv"))
    emit_predictions(config_for(workspace, "b.csv"))
    assert (workspace / "a.csv").read_bytes() == (workspace / "b.csv").read_bytes()
    assert (workspace / "a.csv.meta.json").read_bytes() == (
        workspace / "b.csv.meta.json"
    ).read_bytes()


def test_distinct_file_names_get_distinct_rows(workspace):
    emit_predictions(config_for(workspace))
    preds = read_predictions(workspace / "preds.csv")
    assert not np.array_equal(preds.row("img00"), preds.row("img01"))


def test_stub_needs_no_image_content():
    a = stub_probabilities("dir1/scan.png", 4)
    b = stub_probabilities("dir2/scan.png", 4)
    assert np.array_equal(a, b)  # name-derived, content never read
    assert a.shape == (4,)
    assert abs(a.sum() - 1.0) < 1e-12
    assert np.all(a > 0)


def test_missing_images_are_reported_per_file(workspace):
    (workspace / "images" / "img03.png").unlink()
    (workspace / "images" / "img07.png").unlink()
    with pytest.raises(AdapterError) as err:
        emit_predictions(config_for(workspace))
    assert len(err.value.reports) == 2
    assert "img03" in err.value.reports[0]
    assert "img07" in err.value.reports[1]
    assert not (workspace / "preds.csv").exists()


def test_manifest_errors_carry_line_numbers(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,file\n", encoding="utf-8")
    with pytest.raises(AdapterError, match="line 1"):
        read_image_manifest(bad)

    bad.write_text(
        "image_id,path\na,one.png\nb,two.png,extra\na,three.png\n", encoding="utf-8"
    )
    with pytest.raises(AdapterError) as err:
        read_image_manifest(bad)
    assert any("line 3" in r and "2 fields" in r for r in err.value.reports)
    assert any("line 4" in r and "duplicate" in r for r in err.value.reports)

    bad.write_text("image_id,path\n", encoding="utf-8")
    with pytest.raises(AdapterError, match="no images"):
        read_image_manifest(bad)


def test_config_validation():
    with pytest.raises(AdapterError, match="num_classes"):
        AdapterConfig(manifest="m", out="o", num_classes=1)
    with pytest.raises(AdapterError, match="resize"):
        AdapterConfig(manifest="m", out="o", resize=0)
    with pytest.raises(AdapterError, match="backbone"):
        AdapterConfig(manifest="m", out="o", backbone="")


def test_unknown_backbone_is_rejected(workspace):
    with pytest.raises(AdapterError, match="unknown backbone"):
        emit_predictions(config_for(workspace, backbone="resnet18"))


def test_real_backbones_demand_local_weights(workspace):
    with pytest.raises(AdapterError, match="weights"):
        emit_predictions(config_for(workspace, backbone="torchvision:resnet18"))
    with pytest.raises(AdapterError, match="not found"):
        emit_predictions(
            config_for(
                workspace,
                backbone="torchvision:resnet18",
                weights=str(workspace / "absent.pth"),
            )
        )


def test_output_appears_fully_formed(workspace):
    emit_predictions(config_for(workspace))
    leftovers = [p.name for p in workspace.iterdir() if p.suffix == ".part"]
    assert leftovers == []
    assert (workspace / "preds.csv").exists()
    assert (workspace / "preds.csv.meta.json").exists()


def test_sidecar_records_settings(workspace):
    import json

    emit_predictions(config_for(workspace, resize=224, num_classes=5))
    meta = json.loads((workspace / "preds.csv.meta.json").read_text())
    assert meta == {
        "backbone": "stub",
        "classes": 5,
        "device": "cpu",
        "resize": 224,
        "rows": 10,
    }
    emit_predictions(config_for(workspace, "native.csv"))
    meta = json.loads((workspace / "native.csv.meta.json").read_text())
    assert meta["resize"] is None


def test_cli_roundtrip(workspace, capsys):
    out = workspace / "cli.csv"
    code = main(
        [
            "--manifest", str(workspace / "manifest.csv"),
            "--out", str(out),
            "--num-classes", "4",
        ]
    )
    assert code == 0
    assert f"10 rows -> {out}" in capsys.readouterr().out
    preds = read_predictions(out)
    assert preds.num_classes == 4
    assert list(preds.ids) == IDS


def test_cli_reports_every_missing_file(workspace, capsys):
    (workspace / "images" / "img01.png").unlink()
    (workspace / "images" / "img09.png").unlink()
    code = main(
        ["--manifest", str(workspace / "manifest.csv"), "--out", str(workspace / "p.csv")]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert err.count("error:") == 2
    assert "img01" in err and "img09" in err


def test_cli_rejects_bad_resize(workspace, capsys):
    code = main(
        [
            "--manifest", str(workspace / "manifest.csv"),
            "--out", str(workspace / "p.csv"),
            "--resize", "big",
        ]
    )
    assert code == 1
    assert "--resize" in capsys.readouterr().err


def test_cli_usage_errors_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--out", "p.csv"])  # manifest flag missing
    assert exc.value.code != 0
    capsys.readouterr()
