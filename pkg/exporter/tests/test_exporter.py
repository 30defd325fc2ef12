import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from crater_exporter import (
    ExportManifest,
    Owlv2Backend,
    SyntheticBackend,
    export_anchor,
    export_predictions,
    tile_key_from_stem,
)
from crater_exporter.cli import main


def _schema_validator(name):
    """Validator for the interchange schemas shipped by the primary package."""
    import importlib.resources as res

    import jsonschema

    store = {}
    for n in ("prediction", "anchor", "manifest"):
        doc = json.loads((res.files("craterkit") / "schemas" / f"{n}.schema.json").read_text())
        store[doc["$id"]] = doc
    schema = store[f"craterkit/{name}.schema.json"]
    try:
        from referencing import Registry, Resource

        registry = Registry().with_resources(
            (uri, Resource.from_contents(doc)) for uri, doc in store.items()
        )
        return jsonschema.Draft202012Validator(schema, registry=registry)
    except ImportError:
        resolver = jsonschema.RefResolver.from_schema(schema, store=store)
        return jsonschema.Draft202012Validator(schema, resolver=resolver)


def _write_tiles(root, names, size=512):
    rng = np.random.default_rng(1)
    root.mkdir(parents=True, exist_ok=True)
    for name in names:
        pixels = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
        Image.fromarray(pixels, mode="L").save(root / f"{name}.png")


# ---------------------------------------------------------------------------
# manifest and naming
# ---------------------------------------------------------------------------

def test_owlv2_manifest_constants():
    # constructible without loading any weights
    grid = Owlv2Backend.IMAGE_SIZE // Owlv2Backend.PATCH_SIZE
    m = ExportManifest(
        model_id=Owlv2Backend.DEFAULT_MODEL_ID,
        image_size=Owlv2Backend.IMAGE_SIZE,
        patch_size=Owlv2Backend.PATCH_SIZE,
        token_count=grid * grid,
        embedding_dim=Owlv2Backend.EMBEDDING_DIM,
        prompt="crater",
    )
    assert (m.image_size, m.patch_size, m.token_count, m.embedding_dim) == (960, 16, 3600, 512)


def test_manifest_rejects_inconsistent_grid():
    with pytest.raises(ValueError):
        ExportManifest("m", 960, 16, 100, 512, "crater")


def test_tile_key_parsing():
    assert tile_key_from_stem("M1184106708LC_1508_34916_2048_s07") == (
        "M1184106708LC_1508_34916_2048#7"
    )
    assert tile_key_from_stem("M1184106708LC_1508_34916_2048") == (
        "M1184106708LC_1508_34916_2048#0"
    )
    assert tile_key_from_stem("random_picture") is None
    assert tile_key_from_stem("M1_0_0_2048_s16") is None  # sub-tile out of range


# ---------------------------------------------------------------------------
# synthetic export
# ---------------------------------------------------------------------------

def test_anchor_is_unit_norm(tmp_path):
    backend = SyntheticBackend()
    anchor = export_anchor(backend, "crater", tmp_path / "anchor.json")
    assert abs(np.linalg.norm(anchor) - 1.0) < 1e-5
    obj = json.loads((tmp_path / "anchor.json").read_text())
    _schema_validator("anchor").validate(obj)
    assert obj["manifest"]["embedding_dim"] == 512


def test_anchor_deterministic(tmp_path):
    backend = SyntheticBackend()
    export_anchor(backend, "crater", tmp_path / "a1.json")
    export_anchor(backend, "crater", tmp_path / "a2.json")
    assert (tmp_path / "a1.json").read_bytes() == (tmp_path / "a2.json").read_bytes()


def test_empty_prompt_rejected(tmp_path):
    from crater_exporter.export import ExportInputError

    with pytest.raises(ExportInputError):
        export_anchor(SyntheticBackend(), "", tmp_path / "anchor.json")


def test_predictions_validate_and_scores_recompute(tmp_path):
    backend = SyntheticBackend()
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0001LC_0_0_2048_s00", "M0001LC_0_0_2048_s01"])
    anchor = export_anchor(backend, "crater", tmp_path / "anchor.json")
    out = tmp_path / "preds.jsonl"
    written, skipped = export_predictions(
        backend, sorted(tiles.glob("*.png")), anchor, "crater", out
    )
    assert skipped == []
    assert written == 2 * backend.grid * backend.grid

    validator = _schema_validator("prediction")
    manifest_validator = _schema_validator("manifest")
    lines = out.read_text().strip().split("\n")
    manifest_validator.validate(json.loads(lines[0]))
    records = [json.loads(line) for line in lines[1:]]
    assert len(records) == written
    rng = np.random.default_rng(0)
    sampled = rng.choice(len(records), size=100, replace=len(records) < 100)
    for k in sampled:
        rec = records[int(k)]
        validator.validate(rec)
        emb = np.asarray(rec["embedding"], dtype=np.float64)
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-5
        fresh = float(emb @ anchor / (np.linalg.norm(emb) * np.linalg.norm(anchor)))
        assert abs(fresh - rec["score"]) < 1e-5
        x1 = rec["box"][0] - rec["box"][2] / 2
        y1 = rec["box"][1] - rec["box"][3] / 2
        x2 = rec["box"][0] + rec["box"][2] / 2
        y2 = rec["box"][1] + rec["box"][3] / 2
        assert 0.0 <= x1 < x2 <= 1.0
        assert 0.0 <= y1 < y2 <= 1.0


def test_blank_black_tile_smoke(tmp_path):
    backend = SyntheticBackend()
    tiles = tmp_path / "tiles"
    tiles.mkdir()
    Image.fromarray(np.zeros((512, 512), dtype=np.uint8), mode="L").save(
        tiles / "M0002LC_0_0_2048_s00.png"
    )
    anchor = export_anchor(backend, "crater", tmp_path / "anchor.json")
    out = tmp_path / "preds.jsonl"
    written, skipped = export_predictions(
        backend, sorted(tiles.glob("*.png")), anchor, "crater", out
    )
    assert written > 0 and skipped == []


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_export_synthetic(tmp_path):
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0003LC_0_0_2048_s00"])
    out = tmp_path / "preds.jsonl"
    rc = main([
        "export", "--tiles", str(tiles), "--backend", "synthetic",
        "--prompt", "crater", "--out", str(out),
    ])
    assert rc == 0
    assert out.exists()
    assert (tmp_path / "anchor.json").exists()


def test_cli_determinism(tmp_path):
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0004LC_0_0_2048_s00"])
    for k in (1, 2):
        main([
            "export", "--tiles", str(tiles), "--backend", "synthetic",
            "--out", str(tmp_path / f"p{k}.jsonl"),
            "--anchor-out", str(tmp_path / f"a{k}.json"),
        ])
    assert (tmp_path / "p1.jsonl").read_bytes() == (tmp_path / "p2.jsonl").read_bytes()
    assert (tmp_path / "a1.json").read_bytes() == (tmp_path / "a2.json").read_bytes()


def test_cli_empty_prompt_exit_2(tmp_path):
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0005LC_0_0_2048_s00"])
    rc = main(["export", "--tiles", str(tiles), "--backend", "synthetic",
               "--prompt", "", "--out", str(tmp_path / "p.jsonl")])
    assert rc == 2


def test_cli_unusable_tile_skipped_with_warning(tmp_path, capsys):
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0006LC_0_0_2048_s00"])
    (tiles / "not_a_tile_name.png").write_bytes(b"this is not a png")
    rc = main(["export", "--tiles", str(tiles), "--backend", "synthetic",
               "--out", str(tmp_path / "p.jsonl")])
    err = capsys.readouterr().err
    assert rc == 1
    assert "skipped" in err


def test_cli_owlv2_unavailable_exit_3(tmp_path, monkeypatch):
    # point the hub cache somewhere empty and force offline mode so the
    # checkpoint load fails fast
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
    monkeypatch.setenv("HF_HOME", str(tmp_path / "hfhome"))
    tiles = tmp_path / "tiles"
    _write_tiles(tiles, ["M0007LC_0_0_2048_s00"], size=64)
    rc = main(["export", "--tiles", str(tiles), "--backend", "owlv2",
               "--out", str(tmp_path / "p.jsonl")])
    assert rc == 3


# ---------------------------------------------------------------------------
# round trip through the primary toolkit
# ---------------------------------------------------------------------------

def test_round_trip_consumed_by_primary_eval(tmp_path):
    tiles = tmp_path / "tiles"
    names = ["M0008LC_0_0_2048_s00", "M0008LC_0_0_2048_s01"]
    _write_tiles(tiles, names)
    out = tmp_path / "preds.jsonl"
    rc = main([
        "export", "--tiles", str(tiles), "--backend", "synthetic",
        "--out", str(out), "--anchor-out", str(tmp_path / "anchor.json"),
    ])
    assert rc == 0

    gt = tmp_path / "gt.jsonl"
    gt.write_text(
        json.dumps({"tile": "M0008LC_0_0_2048", "sub_tile": 0,
                    "boxes": [[0.5, 0.5, 0.2, 0.2]]}) + "\n"
        + json.dumps({"tile": "M0008LC_0_0_2048", "sub_tile": 1,
                      "boxes": [[0.25, 0.25, 0.1, 0.1]]}) + "\n"
    )
    proc = subprocess.run(
        [
            sys.executable, "-m", "craterkit.cli", "eval",
            "--predictions", str(out), "--gt", str(gt),
            "--anchor", str(tmp_path / "anchor.json"),
            "--score-threshold", "-1.0",
            "--out-table", str(tmp_path / "report.txt"),
            "--out-csv", str(tmp_path / "report.csv"),
        ],
        capture_output=True,
        text=True,
        env={"PATH": "/usr/bin:/bin", "NO_COLOR": "1"},
    )
    assert proc.returncode == 0, proc.stderr
    table = (tmp_path / "report.txt").read_text()
    assert "M0008LC_0_0_2048" in table
    assert "mean" in table
