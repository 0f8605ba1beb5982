import csv
import json

import numpy as np
import pytest

from ftrj.cli import main
from ftrj.pipeline import EXIT_CONFIG, EXIT_DATA, EXIT_EVALUATION, METRICS_SCHEMA_VERSION

TINY = """\
net.hidden = 16
net.layers = 2
classifier.max_epochs = 3
train.iters = 3
train.batch = 32
flow.iters = 3
flow.batch = 32
flow.steps = 10
eval.grid = 5
eval.allowed_classes = ["0", "1", "4"]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["pipeline", "--config", str(cfg), "--out", str(root / "r")]) == 0
    return root / "r"


def test_dry_run_writes_manifest_only(tiny, tmp_path):
    out = tmp_path / "dry"
    assert main(["pipeline", "--config", str(tiny), "--out", str(out), "--dry-run"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "dry-run"
    assert set(manifest["seeds"]) == {"data", "classifier", "metric", "flow", "eval"}
    assert (out / "config.echo").exists()
    assert not list((out / "checkpoints").iterdir())
    assert not (out / "metrics.json").exists()


def test_exit_codes(tmp_path, tiny):
    bad = tmp_path / "bad.cfg"
    bad.write_text("finsler.lambda = -1\n")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert main(["pipeline", "--config", str(tiny), "--out", str(tmp_path / "b"),
                 "--dataset", str(tmp_path / "missing.csv")]) == EXIT_DATA
    assert main(["export-plots", "--out", str(tmp_path / "nowhere")]) == EXIT_CONFIG
    assert main(["sweep", "--config", str(tiny), "--out", str(tmp_path / "s"), "--lambdas", ","]) == EXIT_CONFIG


def test_pipeline_outputs(finished_run):
    metrics = json.loads((finished_run / "metrics.json").read_text())
    assert metrics["schema_version"] == METRICS_SCHEMA_VERSION
    assert set(metrics["w1_per_t"]) == {"1.0"}
    assert metrics["w1_mean"] == metrics["w1_per_t"]["1.0"]
    assert 0.0 <= metrics["lineage_consistency"] <= 1.0
    assert 0.0 <= metrics["allowed_consistency"] <= 1.0
    rows = list(csv.DictReader((finished_run / "trajectories.csv").open()))
    assert len(rows) == 50 * 5
    for r in rows:
        assert sum(float(r[f"p_class_{c}"]) for c in range(5)) == pytest.approx(1.0, abs=1e-12)
    manifest = json.loads((finished_run / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert {"classifier", "metric", "flow", "evaluate"} <= set(manifest["timings"])
    assert sorted(p.name for p in (finished_run / "checkpoints").iterdir()) == [
        "classifier.ftrj", "embedding.ftrj", "flow.ftrj", "geodesic.ftrj"]


def test_export_is_idempotent(finished_run):
    before = (finished_run / "trajectories.csv").read_bytes()
    marg = (finished_run / "marginals.csv").read_bytes()
    metrics = (finished_run / "metrics.json").read_bytes()
    assert main(["export-plots", "--out", str(finished_run)]) == 0
    assert (finished_run / "trajectories.csv").read_bytes() == before
    assert (finished_run / "marginals.csv").read_bytes() == marg
    assert (finished_run / "metrics.json").read_bytes() == metrics


def test_evaluate_reuses_checkpoints(finished_run, capsys):
    assert main(["evaluate", "--out", str(finished_run)]) == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads((finished_run / "metrics.json").read_text())
    assert printed == saved
    assert main(["evaluate", "--out", str(finished_run), "--heldout", "7"]) == EXIT_EVALUATION


def test_same_config_same_metrics(finished_run, tiny, tmp_path):
    assert main(["pipeline", "--config", str(tiny), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.json").read_bytes() == (finished_run / "metrics.json").read_bytes()


def test_phase_subcommands_match_pipeline(finished_run, tiny, tmp_path):
    out = str(tmp_path / "phased")
    assert main(["train-classifier", "--config", str(tiny), "--out", out]) == 0
    assert main(["train-metric", "--out", out]) == 0
    assert main(["train-flow", "--out", out]) == 0
    assert main(["evaluate", "--out", out]) == 0
    got = json.loads((tmp_path / "phased" / "metrics.json").read_text())
    want = json.loads((finished_run / "metrics.json").read_text())
    assert got == want


def test_train_metric_without_classifier_fails(tiny, tmp_path):
    out = tmp_path / "x"
    assert main(["pipeline", "--config", str(tiny), "--out", str(out), "--dry-run"]) == 0
    assert main(["train-metric", "--out", str(out)]) != 0


def test_gen_synthetic_and_csv_input(tiny, tmp_path):
    assert main(["gen-synthetic", "--config", str(tiny), "--out", str(tmp_path / "d")]) == 0
    data, lineage = tmp_path / "d" / "dataset.csv", tmp_path / "d" / "lineage.json"
    assert json.loads(lineage.read_text())["classes"] == ["0", "1", "2", "3", "4"]
    assert main(["pipeline", "--config", str(tiny), "--out", str(tmp_path / "r"), "--dataset", str(data),
                 "--lineage", str(lineage), "--heldout", "1"]) == 0
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert manifest["inputs"]["data.path"] and manifest["inputs"]["lineage.path"]


def test_single_cell_sweep(tiny, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny), "--out", str(out), "--lambdas", "0.5", "--smoothings", "0.05",
                 "--seeds", "2"]) == 0
    result = json.loads((out / "sweep.json").read_text())
    assert len(result["table"]) == 1
    assert result["best"] == {"lambda": 0.5, "smoothing": 0.05}
    assert len(result["test_w1"]) == 2
    assert np.isfinite(result["test_w1_mean"])
