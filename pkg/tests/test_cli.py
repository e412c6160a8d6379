import csv
import json

import pytest

from clic.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, git_blob_hash, main

TINY = ["--set", "iterations=2", "--set", "eval_size=20", "--set", "train_size=4", "--set", "episodes=1",
        "--set", "sac_hidden=8", "--set", "sac_layers=2", "--set", "sac_batch_size=16", "--set", "warmup=40",
        "--set", "pred_hidden=8", "--set", "pred_layers=2", "--set", "pred_epochs=2", "--set", "eval_chunk=16",
        "--set", "reweight_draws=2000"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "40", "--seed", "1", "--out", str(root / "gen")]) == EXIT_OK
    lib = str(root / "gen" / "library.jsonl")
    assert main(["train", "--library", lib, "--out", str(root / "run"), *TINY]) == EXIT_OK
    return root, lib


def test_gen_is_reproducible(workspace, tmp_path):
    root, lib = workspace
    assert main(["gen", "--n", "40", "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert git_blob_hash(tmp_path / "library.jsonl") == git_blob_hash(lib)
    man = json.loads((tmp_path / "manifest_gen.json").read_text())
    assert man["status"] == "complete" and man["library_hash"] == git_blob_hash(lib)
    report = json.loads((tmp_path / "generation_report.json").read_text())
    assert report["n_scenarios"] == 40


def test_stats_and_validate(workspace, tmp_path):
    _, lib = workspace
    assert main(["stats", "--library", lib, "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "stats.json").read_text())["n_scenarios"] == 40
    assert main(["validate", "--library", lib, "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "violations.json").read_text())["violations"] == []


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("metrics.json", "outcomes_initial.csv", "outcomes_final.csv", "config_train.cfg",
                 "manifest_train.json", "checkpoints/agent_002.bin", "records/iter_002.json"):
        assert (run / name).exists(), name
    m = json.loads((run / "metrics.json").read_text())
    assert m["M"] == 40 and m["TP"] + m["FN"] + m["FP"] + m["TN"] == 40


def test_test_command_with_baseline(workspace, tmp_path):
    root, lib = workspace
    run = root / "run"
    code = main(["test", "--library", lib, "--agent", str(run / "checkpoints/agent_002.bin"),
                 "--baseline", str(run / "outcomes_initial.csv"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert json.loads((tmp_path / "metrics.json").read_text()) == \
        json.loads((run / "metrics.json").read_text())


def test_matrix_reweight_export(workspace, tmp_path):
    root, _ = workspace
    run = str(root / "run")
    assert main(["matrix", "--run", run, "--size", "10"]) == EXIT_OK
    with open(root / "run" / "matrix.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 3 and len(rows[0]) == 3
    assert (root / "run" / "manifest_train.json").exists()
    assert (root / "run" / "manifest_matrix.json").exists()
    assert main(["reweight", "--run", run, "--out", str(tmp_path / "r")]) == EXIT_OK
    res = json.loads((tmp_path / "r" / "reweight.json").read_text())
    assert set(res) == {"before", "after"}
    assert main(["export", "--run", run, "--out", str(tmp_path / "e")]) == EXIT_OK
    with open(tmp_path / "e" / "iterations.csv") as f:
        assert len(list(csv.reader(f))) == 3


def test_individualize(workspace, tmp_path):
    root, lib = workspace
    code = main(["individualize", "--library", lib, "--agent", str(root / "run/checkpoints/agent_002.bin"),
                 "--size", "8", *TINY, "--out", str(tmp_path)])
    assert code == EXIT_OK
    res = json.loads((tmp_path / "individualization.json").read_text())
    assert len(res["masked"]["selected_ids"]) == 8


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["gen", "--set", "nonsense=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[config]:") and "nonsense" in err[0]


def test_missing_library_is_config_error(tmp_path):
    assert main(["stats", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_data_error_exit_codes(workspace, tmp_path, capsys):
    root, lib = workspace
    assert main(["stats", "--library", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == EXIT_DATA
    bad = tmp_path / "agent.bin"
    raw = bytearray((root / "run/checkpoints/agent_001.bin").read_bytes())
    raw[-1] ^= 0xFF
    bad.write_bytes(raw)
    assert main(["test", "--library", lib, "--agent", str(bad), "--out", str(tmp_path)]) == EXIT_DATA
    assert "checksum" in capsys.readouterr().err
    assert main(["export", "--run", str(tmp_path), "--out", str(tmp_path)]) == EXIT_DATA


def test_manifest_records_failure_state(tmp_path):
    main(["stats", "--library", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)])
    man = json.loads((tmp_path / "manifest_stats.json").read_text())
    assert man["status"] == "failed" and man["error"].startswith("data:")
