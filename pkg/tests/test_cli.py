# tests/test_cli.py
import json

import numpy as np
import pandas as pd
import pytest
import yaml

from cli import build_parser, main, target_weights
from config import load_run_config

FAST = ["train.epochs=40", "aggregate.epochs=40", "train.eval_every=20"]


def run(command, tmp_path, *extra, sets=()):
    argv = [command, "tiny", "--set", f"output_dir={tmp_path}"]
    for s in (*FAST, *sets):
        argv += ["--set", s]
    return main(argv + list(extra))


@pytest.fixture
def trained(tmp_path):
    assert run("train-clients", tmp_path) == 0
    return tmp_path / "tiny"


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["sweep", "tiny", "--axis", "noise", "--set", "seed=1", "--set", "train.epochs=2"])
    assert args.set == ["seed=1", "train.epochs=2"]


def test_train_clients_writes_snapshots_and_manifest(trained):
    manifest = yaml.safe_load((trained / "manifest.yaml").read_text(encoding="utf-8"))
    assert manifest["experiment"] == "tiny"
    assert [c["snapshot"] for c in manifest["clients"]] == ["client0.gfnpolicy", "client1.gfnpolicy"]
    assert manifest["failed"] == []
    for k in range(2):
        assert (trained / f"client{k}.gfnpolicy").exists()
        metrics = pd.read_csv(trained / f"client{k}_metrics.csv")
        assert list(metrics.columns) == ["epoch", "loss", "l1", "wall_ms"]
        assert len(metrics) == 40


def test_train_local_single_client(tmp_path):
    assert run("train-local", tmp_path, "--client", "1") == 0
    assert (tmp_path / "tiny" / "client1.gfnpolicy").exists()
    assert not (tmp_path / "tiny" / "client0.gfnpolicy").exists()
    assert run("train-local", tmp_path, "--client", "5") == 2


def test_aggregate_then_evaluate(trained, tmp_path):
    assert run("aggregate", tmp_path) == 0
    assert (trained / "global.gfnpolicy").exists()
    assert len(pd.read_csv(trained / "global_metrics.csv")) == 40
    report = json.loads((trained / "report.json").read_text(encoding="utf-8"))
    assert set(report["models"]) == {"client0", "client1", "global"}
    assert report["target"] == "reward-product(2)"
    for entry in report["models"].values():
        assert 0.0 <= entry["l1"] <= 2.0
        assert entry["provenance"] == "exact-dp"

    assert run("baselines", tmp_path, "--only", "pcvi,fedavg,product") == 0
    assert run("evaluate", tmp_path) == 0
    report = json.loads((trained / "report.json").read_text(encoding="utf-8"))
    assert set(report["baselines"]) == {"pcvi", "fedavg", "product"}
    assert "fedavg" in report["models"]
    assert (trained / "pcvi_params.csv").exists()
    assert np.isfinite(report["baselines"]["pcvi"]["l1"])


def test_weighted_aggregation(trained, tmp_path):
    assert run("aggregate", tmp_path, "--weights", "2,1") == 0
    report = json.loads((trained / "report.json").read_text(encoding="utf-8"))
    assert report["weights"] == [2.0, 1.0]
    assert run("aggregate", tmp_path, "--weights", "2") == 2


def test_centralized_baseline(trained, tmp_path):
    assert run("baselines", tmp_path, "--only", "centralized") == 0
    assert (trained / "centralized.gfnpolicy").exists()
    assert len(pd.read_csv(trained / "centralized_metrics.csv")) == 40


def test_exit_codes(tmp_path):
    assert run("train-clients", tmp_path, sets=["loss.kind=AB"]) == 2
    assert run("aggregate", tmp_path) == 2
    assert main(["train-clients", str(tmp_path / "missing.yaml")]) == 2


def test_failed_client_exits_3(tmp_path):
    # DBC 要求每个状态都是终止态，multiset 不满足
    assert run("train-clients", tmp_path, sets=["loss.kind=DBC"]) == 3
    manifest = yaml.safe_load((tmp_path / "tiny" / "manifest.yaml").read_text(encoding="utf-8"))
    assert manifest["clients"] == []
    assert len(manifest["failed"]) == 2
    assert "UnsupportedError" in manifest["failed"][0]["error"]


@pytest.mark.parametrize("axis, series", [("loss", {"CB", "TB"}), ("clients", {"global"})])
def test_sweep(tmp_path, axis, series):
    assert run("sweep", tmp_path, "--axis", axis) == 0
    df = pd.read_csv(tmp_path / "tiny" / f"sweep_{axis}.csv")
    assert list(df.columns) == ["axis_value", "series", "seed", "epoch", "metric"]
    assert set(df["series"]) == series
    assert df["metric"].between(0.0, 2.0).all()
    assert not (tmp_path / "tiny" / f"sweep_{axis}_errors.csv").exists()


@pytest.mark.slow
def test_noise_sweep(tmp_path):
    assert run("sweep", tmp_path, "--axis", "noise", "--jobs", "2") == 0
    df = pd.read_csv(tmp_path / "tiny" / "sweep_noise.csv")
    assert sorted(df["axis_value"].unique()) == [0.0, 0.01]


def test_failed_sweep_cells_go_to_sidecar(tmp_path):
    # grid 的 beacons 是按两个客户端写的，clients=1 的格子会在校验时失败
    argv = ["sweep", "grid", "--axis", "clients", "--set", f"output_dir={tmp_path}", "--set", "sweep.clients=[1]"]
    assert main(argv) == 0
    errors = pd.read_csv(tmp_path / "grid" / "sweep_clients_errors.csv")
    assert list(errors.columns) == ["axis_value", "seed", "error"]
    assert errors["error"].str.contains("ConfigError").all()
    assert pd.read_csv(tmp_path / "grid" / "sweep_clients.csv").empty


def test_sweep_needs_values(tmp_path):
    argv = ["sweep", "grid", "--axis", "noise", "--set", f"output_dir={tmp_path}"]
    assert main(argv) == 2


def test_identity_checks_command(tmp_path):
    assert main(["identity-checks", "--instances", "2", "--output-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "identity_checks" / "report.json").read_text(encoding="utf-8"))
    assert report["passed"] is True
    assert report["checks"]["jeffrey_bound"] == 0


def test_weight_precedence():
    cfg = load_run_config("tiny", ["loss.weights=[2, 1]"])
    assert target_weights(cfg) == (2.0, 1.0)
    assert target_weights(cfg.with_overrides(["aggregate.weights=[1, 3]"])) == (1.0, 3.0)
    assert target_weights(cfg, "1,1") == (1.0, 1.0)
    assert target_weights(load_run_config("tiny")) is None


def test_aggregate_reports_effective_target_and_bound(trained, tmp_path):
    assert run("aggregate", tmp_path) == 0
    report = json.loads((trained / "report.json").read_text(encoding="utf-8"))
    diag = report["diagnostics"]
    assert 0.0 <= diag["global_vs_effective_l1"] <= 2.0
    assert 0.0 <= diag["target_vs_effective_l1"] <= 2.0
    assert diag["bound"]["holds"] is True
    assert np.isfinite(report["target_top_k"])


def test_trajectory_guard_skips_diagnostics(trained, tmp_path):
    assert run("aggregate", tmp_path, sets=["eval.trajectory_guard=1"]) == 0
    report = json.loads((trained / "report.json").read_text(encoding="utf-8"))
    assert "trajectories exceeds trajectory guard" in report["diagnostics"]["skipped"]


def test_eval_guard_switches_to_sampling(tmp_path):
    guard = ["eval.guard=3"]
    assert run("train-clients", tmp_path, sets=guard) == 0
    metrics = pd.read_csv(tmp_path / "tiny" / "client0_metrics.csv")
    assert metrics["l1"].isna().all()
    assert run("aggregate", tmp_path, sets=guard) == 0
    report = json.loads((tmp_path / "tiny" / "report.json").read_text(encoding="utf-8"))
    assert report["target"] is None
    assert report["models"]["global"]["provenance"] == "sampled(2000)"
    assert "target_top_k" not in report
