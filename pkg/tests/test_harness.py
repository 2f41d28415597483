"""Harness: corpus determinism and validation, config loading/overrides/hash,
and CLI exit-code behavior."""

import json
import os

import numpy as np
import pytest

from advreal import cli, harness
from advreal.errors import DomainError, ManifestError
from advreal.harness import RunConfig, SyntheticCorpusSpec, generate_corpus, ingest_corpus


def small_spec(n=2, seed=42):
    return SyntheticCorpusSpec(n_scenes=n, seed=seed)


# -- corpus ------------------------------------------------------------------


def test_single_scene_corpus(tmp_path):
    manifest = generate_corpus(small_spec(1), tmp_path / "c")
    lines = manifest.read_text().strip().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert (tmp_path / "c" / rec["image"]).exists()
    assert len(rec["boxes"]) == 1


def test_corpus_regeneration_byte_identical(tmp_path):
    m1 = generate_corpus(small_spec(2), tmp_path / "a")
    m2 = generate_corpus(small_spec(2), tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for rec in [json.loads(l) for l in m1.read_text().splitlines()]:
        b1 = (tmp_path / "a" / rec["image"]).read_bytes()
        b2 = (tmp_path / "b" / rec["image"]).read_bytes()
        assert b1 == b2


def test_corpus_round_trip(tmp_path):
    generate_corpus(small_spec(2), tmp_path / "c")
    samples = ingest_corpus(tmp_path / "c")
    assert len(samples) == 2
    for s in samples:
        img = s.load_image()
        assert img.shape == (416, 416, 3)
        assert s.split in ("train", "test") and s.lighting in ("adequate", "poor")
        for box in s.boxes:
            assert box.inside(416, 416)


def test_corpus_lighting_and_split_counts(tmp_path):
    spec = SyntheticCorpusSpec(n_scenes=10, seed=3, adequate_fraction=0.8,
                               train_fraction=0.7)
    generate_corpus(spec, tmp_path / "c")
    samples = ingest_corpus(tmp_path / "c")
    assert sum(s.lighting == "adequate" for s in samples) == 8
    assert sum(s.split == "train" for s in samples) == 7


def test_missing_image_reports_record(tmp_path):
    generate_corpus(small_spec(1), tmp_path / "c")
    os.remove(tmp_path / "c" / "scene_0000.png")
    with pytest.raises(ManifestError, match="record 1"):
        ingest_corpus(tmp_path / "c")


def test_out_of_bounds_box_rejected(tmp_path):
    generate_corpus(small_spec(1), tmp_path / "c")
    manifest = tmp_path / "c" / "manifest.jsonl"
    rec = json.loads(manifest.read_text())
    rec["boxes"] = [[0, 0, 500, 500]]
    manifest.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestError, match="out of image bounds"):
        ingest_corpus(tmp_path / "c")


def test_malformed_manifest_json(tmp_path):
    path = tmp_path / "c"
    path.mkdir()
    (path / "manifest.jsonl").write_text("{not json\n")
    with pytest.raises(ManifestError, match="record 1"):
        ingest_corpus(path)


def test_lighting_multiplier_validated():
    with pytest.raises(DomainError):
        SyntheticCorpusSpec(n_scenes=1, light_range=(0.0, 0.5))


def test_background_styles_deterministic():
    for style in ("gradient", "noise", "tiled", "mixed"):
        a = harness.make_background(style, np.random.default_rng(7), 128)
        b = harness.make_background(style, np.random.default_rng(7), 128)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


# -- config --------------------------------------------------------------------


def test_config_defaults_serializable_and_hash_stable():
    cfg = RunConfig()
    h1 = cfg.hash()
    cfg2 = RunConfig()
    assert h1 == cfg2.hash()
    cfg2.attack.rounds = 17
    assert h1 != cfg2.hash()


def test_config_file_and_env_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"attack": {"rounds": 5}, "output_dir": "x"}))
    cfg = harness.load_config(path, env={})
    assert cfg.attack.rounds == 5
    assert cfg.output_dir == "x"
    cfg = harness.load_config(path, env={
        "ADVREAL_ATTACK_ROUNDS": "9",
        "ADVREAL_SHAKEDROP_ENABLED": "false",
        "ADVREAL_ATTACK_W_TV": "1.25",
        "ADVREAL_SEEDS_PATCH": "11",
    })
    assert cfg.attack.rounds == 9
    assert cfg.shakedrop.enabled is False
    assert cfg.attack.w_tv == 1.25
    assert cfg.seeds.patch == 11


def test_config_unknown_field_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"attack": {"bogus": 1}}))
    with pytest.raises(DomainError, match="unknown config field"):
        harness.load_config(path, env={})


def test_grid_targets_center_cell():
    from advreal.scene import BoundingBox

    conf_t, box_t = harness._grid_targets([BoundingBox(96, 64, 160, 320)])
    # center (128, 192) -> cell (row 6, col 4)
    assert conf_t[6, 4] == 1.0
    assert conf_t.sum() == 1.0


# -- CLI -------------------------------------------------------------------------


def test_cli_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus-command"])
    assert exc.value.code == 2


def test_cli_gen_corpus_and_demos(tmp_path):
    corpus = tmp_path / "corpus"
    rc = cli.main(["--output", str(tmp_path / "out"), "gen-corpus",
                   "--n-scenes", "2", "--out", str(corpus)])
    assert rc == 0
    assert (corpus / "manifest.jsonl").exists()
    assert not (corpus / cli.LOCK_NAME).exists()  # lock released

    rc = cli.main(["--output", str(tmp_path / "out"), "deform-demo"])
    assert rc == 0
    assert (tmp_path / "out" / "garment_deformed.obj").exists()
    assert (tmp_path / "out" / "deform_summary.json").exists()


def test_cli_eval_missing_corpus_is_error(tmp_path):
    rc = cli.main(["--output", str(tmp_path / "out"), "eval",
                   "--corpus", str(tmp_path / "nope"), "--clean"])
    assert rc == 1


def test_cli_lock_collision(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123")
    rc = cli.main(["--output", str(out), "deform-demo"])
    assert rc == 1


def test_cli_report_without_inputs(tmp_path):
    rc = cli.main(["--output", str(tmp_path / "empty"), "report"])
    assert rc == 1
