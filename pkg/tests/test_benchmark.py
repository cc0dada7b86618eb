import json
import re
from pathlib import Path

import numpy as np
import pytest

from benchmark import (
    CURVE_HEADER,
    RESULTS_HEADER,
    VARIANTS,
    ExperimentConfig,
    run_eval,
    run_ga_solve,
    run_synth_bench,
    run_train,
)
from exceptions import ConfigError
from graphs import Graph, MatchPair, save_match_pair
from matching.graduated_assignment import GraduatedAssignmentConfig
from utils import read_csv

EXPERIMENTS_DIR = Path(__file__).resolve().parent.parent / "experiments"

TINY_CONFIG = {
    "synthetic": {"num_source_nodes": 8, "edge_prob": 0.3, "max_degree": 6},
    "sweep_param": "edge_removal_prob",
    "sweep_values": [0.0, 0.2],
    "matching": {"num_layers": 1, "hidden_dim": 8},
    "consensus_gnn": {"num_layers": 1, "hidden_dim": 8},
    "consensus": {"num_iters_train": 1, "num_iters_test": 2, "random_dim": 4},
    "training": {"epochs": 1, "batch_size": 2, "learning_rate": 0.01},
    "train_pairs": 2,
    "test_pairs": 2,
    "sparse_k": 3,
}


def write_config(path, payload):
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig.load(write_config(tmp_path / "tiny.json", TINY_CONFIG))


def test_config_sections_are_parsed(tiny_config):
    assert tiny_config.synthetic.num_source_nodes == 8
    assert tiny_config.matching.hidden_dim == 8
    assert tiny_config.consensus.num_iters_test == 2
    assert tiny_config.training.epochs == 1
    assert tiny_config.variants == list(VARIANTS)
    assert ExperimentConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_config_errors_name_the_offending_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "train_pairs": 2,\n  "bogus": 1\n}')
    with pytest.raises(ConfigError, match=re.escape(f"{path}:3:")):
        ExperimentConfig.load(str(path))

    path.write_text('{\n  "sweep_param": "noise"\n}')
    with pytest.raises(ConfigError, match=re.escape(f"{path}:2:")):
        ExperimentConfig.load(str(path))

    path.write_text('{\n  "train_pairs": 2,\n  "synthetic": {\n    "edge_prob": 2.0\n  }\n}')
    with pytest.raises(ConfigError, match=re.escape(f"{path}:4:")):
        ExperimentConfig.load(str(path))

    path.write_text('{\n  "train_pairs": 2,\n  oops\n}')
    with pytest.raises(ConfigError, match=re.escape(f"{path}:3:")):
        ExperimentConfig.load(str(path))

    path.write_text("[1, 2]")
    with pytest.raises(ConfigError, match=re.escape(f"{path}:1:")):
        ExperimentConfig.load(str(path))

    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(tmp_path / "missing.json"))


@pytest.mark.parametrize("bad", [
    {"sweep_values": []},
    {"sweep_values": [1.0]},
    {"num_seeds": 0},
    {"variants": ["refined_magic"]},
    {"topk_sweep": [0]},
    {"synthetic": {"edge_removal_prob": 0.1, "node_addition_frac": 0.1}},
])
def test_invalid_experiment_configs(bad):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**TINY_CONFIG, **bad}).validate()


def test_synth_bench_writes_results(tmp_path, tiny_config):
    out = tmp_path / "bench"
    assert run_synth_bench(tiny_config, workers=1, out_dir=str(out)) == 0

    rows = read_csv(str(out / "results.csv"))
    assert list(rows[0]) == RESULTS_HEADER
    assert {(row["variant"], float(row["noise"])) for row in rows} == {
        (variant, noise) for variant in VARIANTS for noise in (0.0, 0.2)}
    for row in rows:
        assert 0.0 <= float(row["hits1_mean"]) <= 1.0
        assert row["num_seeds"] == "1"

    for variant in VARIANTS:
        curve = read_csv(str(out / f"curve_{variant}.csv"))
        assert list(curve[0]) == CURVE_HEADER
        assert [float(point["x"]) for point in curve] == [0.0, 0.2]
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["training"]["epochs"] == 1
    assert "adam" in resolved
    assert not (out / "ltest_sweep.csv").exists()


def test_synth_bench_optional_sweeps(tmp_path):
    payload = {**TINY_CONFIG, "sweep_values": [0.1], "variants": ["refined_dense"],
               "l_test_sweep": [0, 1], "topk_sweep": [2]}
    cfg = ExperimentConfig.load(write_config(tmp_path / "sweeps.json", payload))
    out = tmp_path / "sweeps"
    assert run_synth_bench(cfg, workers=1, out_dir=str(out)) == 0

    assert [row["variant"] for row in read_csv(str(out / "results.csv"))] == ["refined_dense"]
    ltest = read_csv(str(out / "ltest_sweep.csv"))
    assert [row["num_iters"] for row in ltest] == ["0", "1"]
    topk = read_csv(str(out / "topk_sweep.csv"))
    assert [row["k"] for row in topk] == ["2"]
    assert 0.0 <= float(topk[0]["initial_hits_k"]) <= 1.0


def test_synth_bench_is_reproducible(tmp_path):
    payload = {**TINY_CONFIG, "sweep_values": [0.1], "variants": ["sinkhorn_L0", "refined_dense"]}
    cfg = ExperimentConfig.load(write_config(tmp_path / "repro.json", payload))
    run_synth_bench(cfg, workers=1, out_dir=str(tmp_path / "a"))
    run_synth_bench(cfg, workers=1, out_dir=str(tmp_path / "b"))
    assert (tmp_path / "a" / "results.csv").read_text() == (tmp_path / "b" / "results.csv").read_text()


def test_train_then_eval_reproduces_metrics(tmp_path, tiny_config):
    checkpoint = run_train(tiny_config, out_dir=str(tmp_path / "train"))
    assert checkpoint.exists()
    assert len(read_csv(str(tmp_path / "train" / "history.csv"))) == 1

    metrics = run_eval(tiny_config, str(checkpoint), out_dir=str(tmp_path / "eval"))
    assert read_csv(str(metrics)) == read_csv(str(tmp_path / "train" / "metrics.csv"))
    trace = read_csv(str(tmp_path / "eval" / "trace.csv"))
    assert [row["iteration"] for row in trace] == ["0", "1", "2"]

    fewer = run_eval(tiny_config, str(checkpoint), out_dir=str(tmp_path / "eval0"), num_iters=0)
    first_stage = [row for row in read_csv(str(tmp_path / "train" / "metrics.csv"))
                   if row["metric"] in ("nll_L0", "hits_L0")]
    assert {row["metric"] for row in first_stage} == {"nll_L0", "hits_L0"}
    assert read_csv(str(fewer)) == first_stage


def test_ga_solve_on_empty_pair(tmp_path):
    empty = Graph.from_pairs(4, [])
    pair_path = tmp_path / "pair.json"
    save_match_pair(MatchPair(empty, empty, np.arange(4)), str(pair_path))

    result = run_ga_solve(str(pair_path), GraduatedAssignmentConfig(iterations=5), out_dir=str(tmp_path / "ga"))
    correspondence = read_csv(str(tmp_path / "ga" / "correspondence.csv"))
    assert len(correspondence) == 16
    assert all(abs(float(row["score"]) - 0.25) < 1e-12 for row in correspondence)
    objective = read_csv(str(tmp_path / "ga" / "objective.csv"))
    assert len(objective) == len(result.objective_trace)
    assert all(float(row["objective"]) == 0.0 for row in objective)


def test_ga_solve_reports_unreadable_pairs(tmp_path):
    with pytest.raises(ConfigError):
        run_ga_solve(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text('{"source": {"num_nodes": 2}}')
    with pytest.raises(ConfigError):
        run_ga_solve(str(broken))


@pytest.mark.parametrize("name", ["edge_removal_sweep", "node_addition_sweep", "topk_sweep"])
def test_shipped_experiment_configs_are_valid(name):
    cfg = ExperimentConfig.load(str(EXPERIMENTS_DIR / f"{name}.json"))
    assert cfg.synthetic.num_source_nodes == 50
    assert cfg.synthetic.edge_prob == 0.2
    assert cfg.consensus.num_iters_train == 10
    assert cfg.consensus.num_iters_test == 20
    assert cfg.num_seeds == 3
    assert max(cfg.sweep_values) <= 0.5


def test_synth_bench_node_addition_sweep(tmp_path):
    payload = {**TINY_CONFIG, "sweep_param": "node_addition_frac", "sweep_values": [0.0, 0.25],
               "consensus": {**TINY_CONFIG["consensus"], "indicator": "identity"}}
    cfg = ExperimentConfig.load(write_config(tmp_path / "nodes.json", payload))
    assert run_synth_bench(cfg, workers=1, out_dir=str(tmp_path / "serial")) == 0
    assert run_synth_bench(cfg, workers=2, out_dir=str(tmp_path / "pool")) == 0

    rows = read_csv(str(tmp_path / "serial" / "results.csv"))
    assert {(row["variant"], float(row["noise"])) for row in rows} == {
        (variant, noise) for variant in VARIANTS for noise in (0.0, 0.25)}
    assert all(0.0 <= float(row["hits1_mean"]) <= 1.0 for row in rows)
    # worker count does not change the per-point random streams
    assert (tmp_path / "serial" / "results.csv").read_text() == (tmp_path / "pool" / "results.csv").read_text()


@pytest.mark.slow
def test_refinement_beats_first_stage_under_node_addition(tmp_path):
    payload = {
        "synthetic": {"num_source_nodes": 20, "edge_prob": 0.2, "max_degree": 10},
        "sweep_param": "node_addition_frac",
        "sweep_values": [0.1, 0.3, 0.5],
        "matching": {"num_layers": 3, "hidden_dim": 32},
        "consensus_gnn": {"num_layers": 3, "hidden_dim": 32},
        "consensus": {"num_iters_train": 5, "num_iters_test": 10, "random_dim": 32},
        "training": {"epochs": 20, "batch_size": 8},
        "train_pairs": 200,
        "test_pairs": 100,
        "variants": ["sinkhorn_L0", "refined_dense"],
    }
    cfg = ExperimentConfig.load(write_config(tmp_path / "dominance.json", payload))
    assert run_synth_bench(cfg, workers=1, out_dir=str(tmp_path / "out")) == 0

    hits = {(row["variant"], float(row["noise"])): float(row["hits1_mean"])
            for row in read_csv(str(tmp_path / "out" / "results.csv"))}
    for q in cfg.sweep_values:
        assert hits[("refined_dense", q)] > hits[("sinkhorn_L0", q)]
