"""End-to-end runs of the command-line interface on a tiny dataset."""

import csv
import json

import pytest

from dalnet.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_VERIFY, load_manifest, main
from dalnet.delta import DeltaLayerConfig
from dalnet.formats import load_model, load_sequence


def gen(out, *extra):
    return main(["gen-data", "--out", str(out), "--n-per-class", "2", "--n-test-per-class", "1",
                 "--frames", "4", "--height", "16", "--width", "16", *extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert gen(root / "data") == EXIT_OK
    for preset in ("baseline", "temporal", "input-delta", "spatial"):
        code = main(["train", "--data", str(root / "data" / "manifest.json"), "--out", str(root / preset),
                     "--preset", preset, "--epochs", "2", "--batch-size", "4"])
        assert code == EXIT_OK
    return root


def test_gen_data_empty(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n-per-class", "0", "--n-test-per-class", "0"]) == EXIT_OK
    assert json.loads((tmp_path / "manifest.json").read_text())["sequences"] == []


def test_gen_data_deterministic(tmp_path, workspace):
    assert gen(tmp_path / "again") == EXIT_OK
    for e in load_manifest(workspace / "data" / "manifest.json"):
        rel = e["path"].split("data/", 1)[1]
        assert (tmp_path / "again" / rel).read_bytes() == (workspace / "data" / rel).read_bytes()
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (workspace / "data" / "manifest.json").read_bytes()


def test_manifest_paths_load(workspace):
    entries = load_manifest(workspace / "data" / "manifest.json")
    assert len(entries) == 12
    assert {e["split"] for e in entries} == {"train", "test"}
    for e in entries:
        assert load_sequence(e["path"]).frames.shape == (4, 16, 16, 1)


def test_presets_shape_the_model(workspace):
    spec, _ = load_model(workspace / "baseline" / "model.dalm")
    assert not spec.has_delta_layers
    spec, _ = load_model(workspace / "temporal" / "model.dalm")
    assert all(isinstance(layer.activation, DeltaLayerConfig) for layer in spec.layers[:-1])
    spec, _ = load_model(workspace / "input-delta" / "model.dalm")
    assert [layer.is_delta for layer in spec.layers] == [True, False, False, False]


def test_train_log_columns(workspace):
    spec, _ = load_model(workspace / "temporal" / "model.dalm")
    rows = list(csv.DictReader((workspace / "temporal" / "train_log.csv").open()))
    assert len(rows) == 2
    for r in rows:
        assert len(r["mean_q_per_layer"].split(";")) == len(spec.layers)
        assert len(r["op_sparsity_per_layer"].split(";")) == len(spec.layers)


def test_train_rerun_is_byte_identical(tmp_path, workspace):
    args = ["train", "--data", str(workspace / "data" / "manifest.json"), "--preset", "temporal", "--epochs", "2", "--batch-size", "4"]
    assert main([*args, "--out", str(tmp_path)]) == EXIT_OK
    for name in ("model.dalm", "train_log.csv", "metrics.json"):
        assert (tmp_path / name).read_bytes() == (workspace / "temporal" / name).read_bytes()
    assert "train_seconds" in json.loads((tmp_path / "timing.json").read_text())


@pytest.mark.parametrize("preset", ["temporal", "baseline", "input-delta", "spatial"])
def test_verify_passes(tmp_path, workspace, preset):
    code = main(["verify", "--model", str(workspace / preset / "model.dalm"),
                 "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    result = json.loads((tmp_path / "verify.json").read_text())
    assert result["passed"] and all(p["max_abs_diff"] <= 1e-4 for p in result["pairs"].values())


def test_verify_negative_control(tmp_path, workspace):
    code = main(["verify", "--model", str(workspace / "temporal" / "model.dalm"),
                 "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path), "--corrupt-q"])
    assert code == EXIT_VERIFY


def test_report_outputs(tmp_path, workspace):
    code = main(["report", "--model", str(workspace / "temporal" / "model.dalm"),
                 "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path), "--divisors", "1,2,4"])
    assert code == EXIT_OK
    assert len((tmp_path / "per_layer.csv").read_text().splitlines()) == 1 + 4
    rows = list(csv.DictReader((tmp_path / "frame_rate.csv").open()))
    assert [int(r["divisor"]) for r in rows] == [4, 2, 1]
    memory = json.loads((tmp_path / "memory.json").read_text())
    assert memory["resnet50"]["1_state_words"]["assumption"].startswith("one state word")


def test_config_file_with_flag_override(tmp_path, workspace):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": str(workspace / "temporal" / "model.dalm"),
                               "data": str(workspace / "data" / "manifest.json"), "divisors": [1, 2], "out": "ignored"}))
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_OK
    assert len((tmp_path / "r" / "frame_rate.csv").read_text().splitlines()) == 3


def test_exit_codes(tmp_path, workspace):
    assert main(["verify", "--model", str(tmp_path / "missing.dalm"), "--data", str(workspace / "data" / "manifest.json")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["report", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["verify", "--model", str(workspace / "temporal" / "model.dalm"),
                 "--data", str(workspace / "data" / "manifest.json"), "--split", "nope"]) == EXIT_CONFIG
    junk = tmp_path / "junk.dalm"
    junk.write_bytes(b"not a model")
    assert main(["verify", "--model", str(junk), "--data", str(workspace / "data" / "manifest.json")]) == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, workspace):
    code = main(["train", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path),
                 "--preset", "baseline", "--epochs", "3", "--lr", "1e30"])
    assert code == EXIT_DIVERGED
