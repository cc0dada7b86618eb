import json

import numpy as np
import pytest

from graphs import Graph, MatchPair, save_match_pair
from main import build_parser, main
from utils import read_csv


@pytest.fixture
def empty_pair_path(tmp_path):
    empty = Graph.from_pairs(3, [])
    path = tmp_path / "pair.json"
    save_match_pair(MatchPair(empty, empty, np.arange(3)), str(path))
    return str(path)


def test_parser_subcommands():
    parser = build_parser()
    args = parser.parse_args(["ga-solve", "--pair", "p.json", "--restarts", "2"])
    assert args.command == "ga-solve"
    assert args.restarts == 2
    args = parser.parse_args(["eval", "--checkpoint", "c.json", "--config", "x.json", "--num-iters", "3"])
    assert args.num_iters == 3
    assert parser.parse_args(["synth-bench", "--config", "x.json"]).workers >= 1
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_ga_solve_command(tmp_path, empty_pair_path):
    out = tmp_path / "ga"
    assert main(["ga-solve", "--pair", empty_pair_path, "--iterations", "3", "--out", str(out)]) == 0
    assert len(read_csv(str(out / "correspondence.csv"))) == 9
    assert (out / "objective.csv").exists()


def test_invalid_arguments_exit_with_two(tmp_path, empty_pair_path):
    assert main(["ga-solve", "--pair", empty_pair_path, "--scale-growth", "1.0", "--out", str(tmp_path)]) == 2


def test_runtime_failures_exit_with_one(tmp_path):
    assert main(["ga-solve", "--pair", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sweep_param": "noise"}))
    assert main(["synth-bench", "--config", str(bad), "--out", str(tmp_path / "bench")]) == 1


def test_train_and_eval_commands(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "synthetic": {"num_source_nodes": 6, "edge_prob": 0.4, "max_degree": 5},
        "matching": {"num_layers": 1, "hidden_dim": 4},
        "consensus_gnn": {"num_layers": 1, "hidden_dim": 4},
        "consensus": {"num_iters_train": 1, "num_iters_test": 1, "random_dim": 4},
        "training": {"epochs": 1, "batch_size": 2},
        "train_pairs": 2,
        "test_pairs": 1,
    }))
    train_dir = tmp_path / "train"
    assert main(["train", "--config", str(config), "--out", str(train_dir)]) == 0
    checkpoint = train_dir / "checkpoint.json"
    assert checkpoint.exists()

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(checkpoint), "--config", str(config), "--out", str(eval_dir)]) == 0
    assert read_csv(str(eval_dir / "metrics.csv")) == read_csv(str(train_dir / "metrics.csv"))
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--config", str(config)]) == 1
