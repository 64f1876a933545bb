import json
import logging
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from fimp.cli import main
from fimp.harness.analysis import read_matrix
from fimp.harness.config import MetricsReport

SMALL = ["--set", "epochs=2", "--set", "d=8", "--set", "batch=16"]


@pytest.fixture
def genes_file(tmp_path):
    assert main(["gen", "--spec", "genes-default", "--out", str(tmp_path / "data"),
                 "--set", "num_nodes=50", "--set", "f=6"]) == 0
    return str(tmp_path / "data" / "genes.json")


def test_gen_writes_graph_and_sidecar(genes_file):
    with open(genes_file.replace(".json", ".spec.json")) as fh:
        side = json.load(fh)
    assert side["generator"] == "genes" and side["spec"]["num_nodes"] == 50
    assert os.path.exists(genes_file.replace(".json", ".f32"))


def test_gen_from_spec_file_and_errors(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"domain": "signal", "num_nodes": 10, "f": 16, "c": 20}))
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
    assert main(["gen", "--spec", "nothing-here", "--out", str(tmp_path / "o")]) == 1
    assert main(["gen", "--spec", "genes-default", "--set", "bogus=1", "--out", str(tmp_path / "o")]) == 1
    assert main(["gen", "--spec", "genes-default", "--set", "k=0", "--out", str(tmp_path / "o")]) == 1


def test_exit_codes(tmp_path, genes_file):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--set", "nope=1"]) == 1
    assert main(["train", "--set", f"dataset={tmp_path / 'missing.json'}", "--out", str(tmp_path)]) == 2
    assert main(["train", "--set", f"dataset={genes_file}", "--model", "fimp-foundation",
                 "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--set", f"dataset={genes_file}", "--out", str(tmp_path)]) == 1
    assert main(["train", "--threads", "0"]) == 1


def test_train_eval_embed_export(tmp_path, genes_file):
    run = tmp_path / "run"
    args = ["--set", f"dataset={genes_file}", *SMALL, "--out", str(run)]
    assert main(["train", *args, "--capture-attention"]) == 0
    for name in ("config.json", "model.npz", "metrics.json", "metrics_curve.csv", "attention_groups.csv"):
        assert (run / name).exists(), name
    trained = MetricsReport.read(run / "metrics.json")
    assert main(["eval", *args, "--weights", str(run / "model.npz")]) == 0
    evaluated = MetricsReport.read(run / "eval.json")
    assert evaluated.test_r2 == trained.test_r2
    assert main(["embed", *args, "--weights", str(run / "model.npz")]) == 0
    assert read_matrix(run / "feature_table.csv").shape == (6, 8)
    assert read_matrix(run / "node_embeddings.csv").shape == (50, 8)
    assert main(["export-attention", *args, "--weights", str(run / "model.npz")]) == 0
    groups = read_matrix(run / "attention_groups.csv")
    assert groups.shape[0] == groups.shape[1]
    assert main(["embed", "--set", f"dataset={genes_file}", "--model", "gcn", "--out", str(run)]) == 1


def test_pretrain_then_foundation_train_logs_transfer_check(tmp_path, genes_file, caplog):
    ckpt = str(tmp_path / "fm.ckpt")
    assert main(["pretrain", "--out", ckpt, "--set", "num_samples=64", "--set", "epochs=1",
                 "--set", "d=8", "--set", 'dataset_overrides={"f": 6}']) == 0
    with open(ckpt + ".json") as fh:
        assert len(json.load(fh)["step_losses"]) == 1
    with caplog.at_level(logging.INFO, logger="fimp"):
        code = main(["train", "--set", f"dataset={genes_file}", *SMALL, "--model", "fimp-foundation",
                     "--ckpt", ckpt, "--out", str(tmp_path / "run")])
    assert code == 0
    assert "transfer equivalence check: passed" in caplog.text
    assert MetricsReport.read(tmp_path / "run" / "metrics.json").model == "fimp-foundation"
    assert main(["pretrain", "--set", "domain=audio", "--out", ckpt]) == 1


def test_selftest_subprocess_under_a_minute():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "fimp.cli", "selftest", "--threads", "1"],
                          capture_output=True, text=True, timeout=120)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.strip().splitlines()
    assert all(line.startswith("PASS") for line in lines) and len(lines) >= 9
    assert elapsed < 60


def test_selftest_reports_failing_check(monkeypatch):
    from fimp import selftest

    lines = []
    monkeypatch.setattr(selftest, "CHECKS", [("always fails", lambda: (False, "x")),
                                             ("raises", lambda: 1 / 0)])
    assert selftest.run_selftest(out=lines.append) is False
    assert lines[0].startswith("FAIL") and "ZeroDivisionError" in lines[1]
