# tests/test_acceptance.py
"""完整流水线（按 config/ 里的设置跑），很慢，用 -m "not slow" 跳过"""
import json

import numpy as np
import pandas as pd
import pytest

from cli import main


def with_sets(argv, tmp_path, sets):
    argv = argv + ["--set", f"output_dir={tmp_path}", "--set", "train.progress=false"]
    for s in sets:
        argv += ["--set", s]
    return argv


def pipeline(name, tmp_path, *sets, baselines=None):
    assert main(with_sets(["train-clients", name], tmp_path, sets)) == 0
    assert main(with_sets(["aggregate", name], tmp_path, sets)) == 0
    if baselines:
        assert main(with_sets(["baselines", name, "--only", baselines], tmp_path, sets)) == 0
    return json.loads((tmp_path / name / "report.json").read_text(encoding="utf-8"))


@pytest.mark.slow
def test_grid(tmp_path):
    report = pipeline("grid", tmp_path)
    assert report["target"] == "reward-product(2)"
    assert report["models"]["global"]["l1"] <= 0.10


@pytest.mark.slow
def test_multiset(tmp_path):
    report = pipeline("multiset", tmp_path, baselines="pcvi,fedavg")
    ep = report["models"]["global"]["l1"]
    assert ep <= 0.30
    assert report["baselines"]["pcvi"]["l1"] >= 2 * ep
    assert report["baselines"]["fedavg"]["l1"] >= 3 * ep
    exact = report["target_top_k"]
    assert abs(report["models"]["global"]["top_k"] - exact) <= 0.01 * abs(exact)


@pytest.mark.slow
def test_sequence(tmp_path):
    report = pipeline("sequence", tmp_path, baselines="pcvi")
    ep = report["models"]["global"]["l1"]
    assert ep <= 0.05
    assert report["baselines"]["pcvi"]["l1"] >= 10 * ep


@pytest.mark.slow
def test_phylo_five_leaves(tmp_path):
    report = pipeline("phylo", tmp_path, "clients.parallelism=1")
    assert report["target"] == "reward-product(3)"
    assert report["models"]["global"]["provenance"] == "exact-dp"
    assert report["models"]["global"]["l1"] <= 0.20


@pytest.mark.slow
def test_phylo_seven_leaves_runs_with_sampled_evaluation(tmp_path):
    report = pipeline(
        "phylo7", tmp_path,
        "train.epochs=20", "aggregate.epochs=20", "train.eval_every=20",
        "eval.samples=2000", "eval.top_k=10", "clients.parallelism=1",
    )
    glob = report["models"]["global"]
    assert glob["provenance"] == "sampled(2000)"
    assert np.isfinite(glob["top_k"])


def epochs_to(df: pd.DataFrame, series: str, threshold: float) -> float:
    hit = df[(df["series"] == series) & (df["metric"] <= threshold)]
    return float(hit["epoch"].min()) if len(hit) else float("inf")


@pytest.mark.slow
def test_cb_is_not_slower_than_tb_on_multisets(tmp_path):
    sets = ["sweep.loss=[CB, TB]", "sweep.seeds=[0, 1, 2]"]
    assert main(with_sets(["sweep", "multiset", "--axis", "loss"], tmp_path, sets)) == 0
    df = pd.read_csv(tmp_path / "multiset" / "sweep_loss.csv")
    wins = 0
    for _, cell in df.groupby("seed"):
        wins += epochs_to(cell, "CB", 0.3) <= epochs_to(cell, "TB", 0.3)
    assert wins >= 2


@pytest.mark.slow
def test_logz_lr_sweep_runs(tmp_path):
    sets = [
        "sweep.logz_lr=[0.001, 0.01, 0.1]", "sweep.loss=[CB, TB]", "sweep.seeds=[0]",
        "train.epochs=200", "train.eval_every=50",
    ]
    assert main(with_sets(["sweep", "multiset", "--axis", "logz_lr"], tmp_path, sets)) == 0
    df = pd.read_csv(tmp_path / "multiset" / "sweep_logz_lr.csv")
    assert sorted(df["axis_value"].unique()) == [0.001, 0.01, 0.1]
    assert set(df["series"]) == {"CB", "TB"}
    assert df["metric"].between(0.0, 2.0).all()
    assert not (tmp_path / "multiset" / "sweep_logz_lr_errors.csv").exists()
