# This file is part of the UrbanVerse tool

# tests/test_pipeline.py
import json
import logging
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import yaml
from scipy.integrate import trapezoid

from common.errors import ConfigError
from data_processing.city_io import write_embeddings
from data_processing.synthetic_city import generate_synthetic
from execution.pipeline import UrbanPipeline
from execution.run import main
from execution.run_config import RunConfig


@pytest.fixture
def workspace(tmp_path, tiny_city_spec, tiny_run_config):
    """Three seeded mini cities plus a tiny run configuration"""
    data = tmp_path / "data"
    dirs = []
    for suffix, seed in [("A", 0), ("B", 1), ("C", 2)]:
        city_dir = str(data / f"mini{suffix}")
        generate_synthetic(replace(tiny_city_spec, name=f"mini{suffix}"), seed, out_dir=city_dir)
        dirs.append(city_dir)
    config = tiny_run_config.to_yaml(str(tmp_path / "tiny.yaml"))
    return {"dirs": dirs, "config": config, "out": str(tmp_path / "out")}


def cli(ws, *args, out=None, cross_city=True):
    argv = list(args) + ["--config", ws["config"], "--out-dir", out or ws["out"], "--log", "stdout",
                         "--prt-vlvl", "0"]
    if cross_city:
        argv += ["--train-cities", "miniA,miniB", "--test-city", "miniC"]
    return main(argv)


def all_cities(ws):
    return ["--cities", ",".join(ws["dirs"])]


def test_full_cross_city_run(workspace):
    assert cli(workspace, "all", *all_cities(workspace)) == 0
    out = workspace["out"]
    predictions = pd.read_csv(os.path.join(out, "predict", "miniC", "predictions.csv"))
    assert len(predictions) == 9 * 2
    assert {"region_id", "task_id", "point", "sample_0", "sample_1"} <= set(predictions.columns)
    with open(os.path.join(out, "eval", "miniC", "metrics.json")) as f:
        metrics = json.load(f)
    assert set(metrics["tasks"]) == {"exp", "lin"}
    assert all(np.isfinite(t["mae"]) for t in metrics["tasks"].values())
    with open(os.path.join(out, "train", "split.json")) as f:
        split = json.load(f)
    assert set(split["train"]) == {"miniA", "miniB"} and list(split["test"]) == ["miniC"]
    for stage in ["pretrain", "train", os.path.join("eval", "miniC"), os.path.join("aggregate", "miniC")]:
        assert os.path.exists(os.path.join(out, stage, "config.yaml")), stage
    priors = pd.read_csv(os.path.join(out, "predict", "miniC", "priors.csv"))
    assert priors["neighbors"].str.startswith("mini").all()


def test_runs_are_reproducible(workspace, tmp_path):
    assert cli(workspace, "all", *all_cities(workspace), out=str(tmp_path / "first")) == 0
    assert cli(workspace, "all", *all_cities(workspace), out=str(tmp_path / "second")) == 0
    first = pd.read_csv(tmp_path / "first" / "predict" / "miniC" / "predictions.csv")
    second = pd.read_csv(tmp_path / "second" / "predict" / "miniC" / "predictions.csv")
    pd.testing.assert_frame_equal(first, second)


def test_stages_one_by_one(workspace, caplog):
    out = workspace["out"]
    assert cli(workspace, "grid", *all_cities(workspace)) == 0
    with caplog.at_level(logging.ERROR):
        assert cli(workspace, "embed") == 3
    assert "run `pretrain` first" in caplog.text
    for stage in ["walks", "pretrain", "embed", "aggregate", "train", "predict"]:
        assert cli(workspace, stage) == 0, stage
    assert os.path.getsize(os.path.join(out, "walks", "miniA", "walks.jsonl")) > 0
    cell_embeddings = pd.read_csv(os.path.join(out, "embed", "miniA", "cell_embeddings.csv"))
    assert list(cell_embeddings.columns[:2]) == ["cell_id", "z_0"] and cell_embeddings.shape[1] == 1 + 16
    assert cli(workspace, "eval", "--density-region", "4", "--density-task", "lin", "--density-samples", "20") == 0
    density = pd.read_csv(os.path.join(out, "eval", "miniC", "density.csv"))
    assert trapezoid(density["f"], density["y"]) == pytest.approx(1.0, abs=1e-2)
    assert os.path.exists(os.path.join(out, "eval", "miniC", "density.svg"))


def test_eval_before_predict_names_the_missing_stage(workspace, caplog):
    assert cli(workspace, "grid", *all_cities(workspace)) == 0
    with caplog.at_level(logging.ERROR):
        assert cli(workspace, "eval") == 3
    assert "run `predict` first" in caplog.text


def test_same_city_protocol(workspace):
    argv = ["all", "--cities", workspace["dirs"][0], "--test-city", "miniA", "--protocol", "same-city"]
    assert cli(workspace, *argv, cross_city=False) == 0
    with open(os.path.join(workspace["out"], "train", "split.json")) as f:
        split = json.load(f)
    train, test = split["train"]["miniA"], split["test"]["miniA"]
    assert len(test) == 2 and len(train) == 7
    assert not set(train) & set(test)
    predictions = pd.read_csv(os.path.join(workspace["out"], "predict", "miniA", "predictions.csv"))
    assert sorted(predictions["region_id"].unique()) == sorted(test)


def test_configuration_errors_exit_with_2(workspace):
    assert cli(workspace, "train", "--train-cities", "miniA,miniC", "--test-city", "miniC", cross_city=False) == 2
    assert cli(workspace, "train", "--K", "0") == 2
    assert cli(workspace, "ablate", "--variants", "w/o-Everything") == 2
    assert cli(workspace, "grid") == 2


def test_ablation_table(workspace):
    assert cli(workspace, "all", *all_cities(workspace)) == 0
    assert cli(workspace, "ablate") == 0
    table = pd.read_csv(os.path.join(workspace["out"], "ablate", "ablation.csv"))
    assert list(table.columns) == ["variant", "task", "MAE", "RMSE", "R2"]
    assert table["variant"].unique().tolist() == ["UrbanVerse", "w/o-Prior", "w/o-Retr", "w/o-EM+C", "w/o-EM+CA",
                                                  "w/o-DiffM"]
    assert len(table) == 6 * 2


def test_finetune_adds_a_task_to_the_trained_head(workspace):
    assert cli(workspace, "all", *all_cities(workspace)) == 0
    assert cli(workspace, "train", "--tasks", "lin") == 0
    assert cli(workspace, "finetune", "--task", "exp") == 0
    assert cli(workspace, "predict", "--source", "finetune") == 0
    predictions = pd.read_csv(os.path.join(workspace["out"], "predict", "miniC", "predictions.csv"))
    assert set(predictions["task_id"]) == {"lin", "exp"}
    assert cli(workspace, "finetune", "--task", "lin") == 2


def test_sweeps(workspace):
    assert cli(workspace, "all", *all_cities(workspace)) == 0
    assert cli(workspace, "sweep", "--param", "sr", "--values", "1,3") == 0
    assert cli(workspace, "sweep", "--param", "k", "--values", "1") == 0
    table = pd.read_csv(os.path.join(workspace["out"], "sweep", "sweep.csv"))
    assert table["param"].unique().tolist() == ["k"] and len(table) == 2
    assert os.path.exists(os.path.join(workspace["out"], "sweep", "k=1", "train", "head.json"))
    assert cli(workspace, "sweep", "--param", "colour", "--values", "1") == 2


def test_external_region_embeddings(workspace, tmp_path):
    assert cli(workspace, "grid", *all_cities(workspace)) == 0
    flags = []
    for i, name in enumerate(["miniA", "miniB", "miniC"]):
        path = str(tmp_path / f"{name}.csv")
        write_embeddings(path, range(9), np.random.default_rng(i).normal(size=(9, 5)))
        flags += ["--embeddings", f"{name}={path}"]
    for stage in ["train", "predict", "eval"]:
        assert cli(workspace, stage, *flags) == 0, stage
    assert cli(workspace, "train", "--embeddings", "broken") == 2


def test_synth_stage_writes_cities(workspace, tmp_path, tiny_city_spec):
    spec = str(tmp_path / "mini.yaml")
    with open(spec, "w") as f:
        yaml.safe_dump(tiny_city_spec.to_dict(), f)
    data_dir = str(tmp_path / "synth")
    argv = ["synth", "--spec", spec, "--seeds", "3", "--names", "Z", "--data-dir", data_dir]
    assert cli(workspace, *argv, cross_city=False) == 0
    for name in ["cells.csv", "edges.csv", "regions.json", "targets.csv", "truth-manifest.json"]:
        assert os.path.exists(os.path.join(data_dir, "Z", name)), name


def test_sweep_refuses_grid_and_setup_fields(workspace, tmp_path):
    pipeline = UrbanPipeline(RunConfig.from_yaml(workspace["config"]), out_dir=str(tmp_path / "none"),
                             train_cities=["miniA", "miniB"], test_city="miniC")
    for param in ("edge_m", "protocol", "precision"):
        with pytest.raises(ConfigError, match=f"cannot sweep {param}"):
            pipeline.run_sweep(param, ["100"])
    assert not os.path.exists(str(tmp_path / "none" / "sweep"))
    assert cli(workspace, "sweep", "--param", "edge_m", "--values", "100,200") == 2
