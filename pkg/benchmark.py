"""
Experiment harness: synthetic noise sweeps, training, evaluation and graduated assignment runs.

Every run writes its fully resolved configuration next to its results so the
output directory describes how it was produced.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from correspondence import write_correspondence_csv, write_metrics_csv
from exceptions import ConfigError
from gnn import GnnConfig
from graphs import MatchPair, SyntheticConfig, build_synthetic_dataset, load_match_pair
from matching.consensus_refiner import ConsensusConfig, ConsensusRefiner, write_trace_csv
from matching.graduated_assignment import (
    GraduatedAssignmentConfig,
    GraduatedAssignmentResult,
    graduated_assignment_solve,
)
from matching.model import ModelConfig, ModelParams, build_model
from matching.trainer import (
    EVAL_STREAM,
    Trainer,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    write_history_csv,
)
from utils import derive_rng, ensure_dir, write_csv, write_json

logger = logging.getLogger(__name__)

VARIANTS = ("softmax_L0", "sinkhorn_L0", "refined_dense", "refined_sparse")
SWEEP_PARAMS = ("edge_removal_prob", "node_addition_frac")
RESULTS_HEADER = ["variant", "noise", "hits1_mean", "hits1_std", "num_seeds"]
CURVE_HEADER = ["x", "y"]
LTEST_HEADER = ["noise", "seed", "num_iters", "loss", "hits1"]
TOPK_HEADER = ["noise", "seed", "k", "initial_hits_k", "refined_hits1"]
OBJECTIVE_HEADER = ["iteration", "objective"]

# Dataset stream ids passed to derive_rng
TRAIN_SPLIT = 0
TEST_SPLIT = 1


@dataclass
class ExperimentConfig:
    """One experiment: a synthetic family, a sweep over one noise parameter, model and training settings."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    sweep_param: str = "edge_removal_prob"
    sweep_values: List[float] = field(default_factory=lambda: [0.0])
    matching: GnnConfig = field(default_factory=GnnConfig)
    consensus_gnn: GnnConfig = field(default_factory=GnnConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    train_pairs: int = 1000
    test_pairs: int = 1000
    num_seeds: int = 1
    sparse_k: int = 10
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    l_test_sweep: List[int] = field(default_factory=list)
    topk_sweep: List[int] = field(default_factory=list)
    hits_k: List[int] = field(default_factory=lambda: [1, 10])
    output_dir: Optional[str] = None

    def validate(self) -> None:
        if self.sweep_param not in SWEEP_PARAMS:
            raise ValueError(f"sweep_param must be one of {SWEEP_PARAMS}, got {self.sweep_param!r}")
        if not self.sweep_values:
            raise ValueError("sweep_values must not be empty")
        for value in self.sweep_values:
            if not 0.0 <= value < 1.0:
                raise ValueError(f"Sweep values must lie in [0, 1), got {value}")
        if self.train_pairs < 1 or self.test_pairs < 1:
            raise ValueError("Dataset sizes must be >= 1")
        if self.num_seeds < 1:
            raise ValueError("num_seeds must be >= 1")
        if self.sparse_k < 1 or any(k < 1 for k in self.topk_sweep) or any(k < 1 for k in self.hits_k):
            raise ValueError("Every k must be >= 1")
        if any(n < 0 for n in self.l_test_sweep):
            raise ValueError("l_test_sweep values must be >= 0")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"Unknown variants {sorted(unknown)}; available: {list(VARIANTS)}")
        self.synthetic.validate()
        self.consensus.validate()
        self.training.validate()
        self.matching.validate()
        self.consensus_gnn.validate()

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["matching"] = self.matching.to_dict()
        payload["consensus_gnn"] = self.consensus_gnn.to_dict()
        payload["consensus"] = self.consensus.to_dict()
        payload["training"] = self.training.to_dict()
        payload["adam"] = {"beta1": Config.ADAM_BETA1, "beta2": Config.ADAM_BETA2, "eps": Config.ADAM_EPS}
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ExperimentConfig":
        payload = dict(payload)
        payload.pop("adam", None)
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown experiment config keys: {sorted(unknown)}")
        sections = {
            "synthetic": lambda p: SyntheticConfig(**p),
            "matching": GnnConfig.from_dict,
            "consensus_gnn": GnnConfig.from_dict,
            "consensus": ConsensusConfig.from_dict,
            "training": TrainConfig.from_dict,
        }
        for key, build in sections.items():
            if key in payload:
                payload[key] = build(payload[key])
        return cls(**payload)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        """
        Read and validate a JSON experiment config.

        Raises:
            ConfigError: With file and line information for parse errors, unknown keys and invalid values
        """
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}:1: the config must be a JSON object")
        try:
            config = cls.from_dict(payload)
            config.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}:{_line_of(text, str(e))}: {e}") from e
        return config


def _line_of(text: str, message: str) -> int:
    """Line of the first quoted config key mentioned in an error message (1 if none is found)."""
    for token in message.replace("[", " ").replace("]", " ").replace(",", " ").split():
        key = token.strip("'\"")
        if not key:
            continue
        position = text.find(f'"{key}"')
        if position >= 0:
            return text.count("\n", 0, position) + 1
    return 1


def model_config_for(cfg: ExperimentConfig, consensus: ConsensusConfig) -> ModelConfig:
    indicator_dim = cfg.synthetic.num_source_nodes if consensus.indicator == "identity" else consensus.random_dim
    return ModelConfig(
        in_dim=cfg.synthetic.max_degree + 1,
        matching=cfg.matching,
        consensus=replace(cfg.consensus_gnn, dropout=0.0),
        indicator_dim=indicator_dim,
    )


def build_datasets(synthetic: SyntheticConfig, train_pairs: int, test_pairs: int,
                   *stream: int) -> Tuple[List[MatchPair], List[MatchPair]]:
    train_set = build_synthetic_dataset(synthetic, train_pairs, derive_rng(synthetic.seed, *stream, TRAIN_SPLIT))
    test_set = build_synthetic_dataset(synthetic, test_pairs, derive_rng(synthetic.seed, *stream, TEST_SPLIT))
    return train_set, test_set


def _dense_consensus(cfg: ExperimentConfig) -> ConsensusConfig:
    return replace(cfg.consensus, normalization="sinkhorn", sparse_k=None, num_negatives=0)


def _sparse_consensus(cfg: ExperimentConfig, k: int) -> ConsensusConfig:
    return replace(cfg.consensus, normalization="row_softmax", indicator="random", sparse_k=k)


def _train_variant(cfg: ExperimentConfig, consensus: ConsensusConfig, seed: int,
                   train_set: Sequence[MatchPair]) -> Trainer:
    model = build_model(model_config_for(cfg, consensus), seed)
    trainer = Trainer(model, replace(cfg.training, seed=seed), consensus)
    trainer.train(train_set)
    return trainer


@dataclass
class SweepPointResult:
    point_index: int
    noise: float
    seed_index: int
    hits1: Dict[str, float] = field(default_factory=dict)
    ltest_rows: List[List[Any]] = field(default_factory=list)
    topk_rows: List[List[Any]] = field(default_factory=list)


def run_sweep_point(cfg: ExperimentConfig, point_index: int, seed_index: int) -> SweepPointResult:
    """
    Train and evaluate every requested variant at one noise level for one seed.

    The point owns the random streams derived from (seed, point_index, seed_index).
    """
    noise = cfg.sweep_values[point_index]
    synthetic = replace(cfg.synthetic, **{cfg.sweep_param: noise})
    train_set, test_set = build_datasets(synthetic, cfg.train_pairs, cfg.test_pairs, point_index, seed_index)
    seed = int(derive_rng(cfg.training.seed, point_index, seed_index).integers(2 ** 31))
    num_iters = cfg.consensus.num_iters_test
    result = SweepPointResult(point_index, noise, seed_index)

    if {"sinkhorn_L0", "refined_dense"} & set(cfg.variants) or cfg.l_test_sweep:
        trainer = _train_variant(cfg, _dense_consensus(cfg), seed, train_set)
        report = trainer.evaluate(test_set, num_iters, cfg.hits_k)
        result.hits1["sinkhorn_L0"] = report.hits(0)
        result.hits1["refined_dense"] = report.hits(num_iters)
        for level in cfg.l_test_sweep:
            level_report = trainer.evaluate(test_set, level, cfg.hits_k)
            result.ltest_rows.append([noise, seed_index, level, level_report.value(f"nll_L{level}", 0),
                                      level_report.hits(level)])

    if {"softmax_L0", "refined_sparse"} & set(cfg.variants):
        trainer = _train_variant(cfg, _sparse_consensus(cfg, cfg.sparse_k), seed, train_set)
        report = trainer.evaluate(test_set, num_iters, cfg.hits_k)
        result.hits1["softmax_L0"] = report.hits(0)
        result.hits1["refined_sparse"] = report.hits(num_iters)

    for k in cfg.topk_sweep:
        trainer = _train_variant(cfg, _sparse_consensus(cfg, k), seed, train_set)
        report = trainer.evaluate(test_set, num_iters, sorted(set(cfg.hits_k) | {1, k}))
        result.topk_rows.append([noise, seed_index, k, report.hits(0, k), report.hits(num_iters)])

    result.hits1 = {variant: value for variant, value in result.hits1.items() if variant in cfg.variants}
    logger.info(f"Sweep point {cfg.sweep_param}={noise} seed {seed_index} finished: "
                + ", ".join(f"{v}={h:.3f}" for v, h in sorted(result.hits1.items())))
    return result


def _run_point_task(task: Tuple[Dict[str, Any], int, int]) -> Tuple[int, int, Optional[SweepPointResult], str]:
    payload, point_index, seed_index = task
    try:
        result = run_sweep_point(ExperimentConfig.from_dict(payload), point_index, seed_index)
        return point_index, seed_index, result, ""
    except Exception as e:
        logger.error(f"Sweep point {point_index} seed {seed_index} failed: {str(e)}", exc_info=True)
        return point_index, seed_index, None, str(e)


def write_bench_results(out_dir: Path, cfg: ExperimentConfig, results: Sequence[SweepPointResult]) -> None:
    """Aggregate per-seed results into results.csv, per-variant curves and optional sweep tables."""
    results = sorted(results, key=lambda r: (r.point_index, r.seed_index))
    rows = []
    curves: Dict[str, List[List[float]]] = {}
    for variant in cfg.variants:
        for point_index, noise in enumerate(cfg.sweep_values):
            values = [r.hits1[variant] for r in results if r.point_index == point_index and variant in r.hits1]
            if not values:
                continue
            mean = float(np.mean(values))
            rows.append([variant, noise, mean, float(np.std(values)), len(values)])
            curves.setdefault(variant, []).append([noise, mean])
    write_csv(out_dir / "results.csv", RESULTS_HEADER, rows)
    for variant, points in curves.items():
        write_csv(out_dir / f"curve_{variant}.csv", CURVE_HEADER, points)
    if cfg.l_test_sweep:
        write_csv(out_dir / "ltest_sweep.csv", LTEST_HEADER, [row for r in results for row in r.ltest_rows])
    if cfg.topk_sweep:
        write_csv(out_dir / "topk_sweep.csv", TOPK_HEADER, [row for r in results for row in r.topk_rows])


def run_synth_bench(cfg: ExperimentConfig, workers: int = Config.DEFAULT_WORKERS,
                    out_dir: Optional[str] = None) -> int:
    """
    Run the synthetic noise sweep.

    Args:
        cfg: Validated experiment config
        workers: Number of worker processes for sweep points
        out_dir: Output directory (default: cfg.output_dir or <output root>/synth-bench)

    Returns:
        0 if every sweep point completed, 1 otherwise (completed points are still written)
    """
    out = ensure_dir(out_dir or cfg.output_dir or os.path.join(Config.OUTPUT_ROOT, "synth-bench"))
    write_json(out / "config.resolved.json", cfg.to_dict())
    payload = cfg.to_dict()
    tasks = [(payload, p, s) for p in range(len(cfg.sweep_values)) for s in range(cfg.num_seeds)]
    logger.info(f"Running {len(tasks)} sweep points with {workers} worker(s), writing to {out}")

    if workers > 1:
        with Pool(workers) as pool:
            outcomes = pool.map(_run_point_task, tasks)
    else:
        outcomes = [_run_point_task(task) for task in tasks]

    results = [result for _, _, result, _ in outcomes if result is not None]
    failures = [(p, s, error) for p, s, result, error in outcomes if result is None]
    write_bench_results(out, cfg, results)
    if failures:
        logger.error(f"{len(failures)} of {len(tasks)} sweep points failed; partial results in {out}")
        return 1
    logger.info(f"Synthetic benchmark finished; results in {out}")
    return 0


def run_train(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> Path:
    """
    Train one model on the configured synthetic family and save it.

    Writes checkpoint.json, history.csv, metrics.csv and config.resolved.json.

    Returns:
        Path of the checkpoint
    """
    out = ensure_dir(out_dir or cfg.output_dir or os.path.join(Config.OUTPUT_ROOT, "train"))
    write_json(out / "config.resolved.json", cfg.to_dict())
    train_set, test_set = build_datasets(cfg.synthetic, cfg.train_pairs, cfg.test_pairs)
    model = build_model(model_config_for(cfg, cfg.consensus), cfg.training.seed)
    trainer = Trainer(model, cfg.training, cfg.consensus)
    checkpoint = out / Config.CHECKPOINT_FILENAME
    history = trainer.train(train_set, test_set, checkpoint_path=str(checkpoint))
    save_checkpoint(str(checkpoint), model, cfg.consensus)
    write_history_csv(out / "history.csv", history)
    report = trainer.evaluate(test_set, ks=cfg.hits_k)
    write_metrics_csv(out / "metrics.csv", report.rows)
    logger.info(f"Training finished; checkpoint at {checkpoint}")
    return checkpoint


def run_eval(cfg: ExperimentConfig, checkpoint_path: str, out_dir: Optional[str] = None,
             num_iters: Optional[int] = None) -> Path:
    """
    Evaluate a saved model on the configured test set.

    Writes metrics.csv and the refinement trace of the first test pair (trace.csv).

    Returns:
        Path of the metrics CSV
    """
    model, _ = load_checkpoint(checkpoint_path)
    out = ensure_dir(out_dir or os.path.dirname(os.path.abspath(checkpoint_path)))
    _, test_set = build_datasets(cfg.synthetic, cfg.train_pairs, cfg.test_pairs)
    trainer = Trainer(model, cfg.training, cfg.consensus)
    levels = cfg.consensus.num_iters_test if num_iters is None else num_iters
    report = trainer.evaluate(test_set, levels, cfg.hits_k)
    metrics = out / "metrics.csv"
    write_metrics_csv(metrics, report.rows)
    _write_first_trace(model, cfg, test_set[0], levels, out / "trace.csv")
    logger.info(f"Evaluation with L={levels}: Hits@1 {report.hits(levels):.4f}; metrics in {metrics}")
    return metrics


def _write_first_trace(model: ModelParams, cfg: ExperimentConfig, pair: MatchPair, num_iters: int,
                       path: Path) -> None:
    model.eval()
    rng = derive_rng(cfg.training.seed, EVAL_STREAM, 0)
    result = ConsensusRefiner(model, cfg.consensus).refine(pair, num_iters, rng)
    write_trace_csv(path, result.trace)


def run_ga_solve(pair_path: str, ga_config: Optional[GraduatedAssignmentConfig] = None,
                 out_dir: Optional[str] = None) -> GraduatedAssignmentResult:
    """
    Solve a stored pair by graduated assignment.

    Writes correspondence.csv and objective.csv (objective per iteration).
    """
    try:
        pair = load_match_pair(pair_path)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"Cannot load pair {pair_path}: {e}") from e
    result = graduated_assignment_solve(pair, ga_config)
    out = ensure_dir(out_dir or os.path.join(Config.OUTPUT_ROOT, "ga-solve"))
    write_correspondence_csv(out / "correspondence.csv", result.matrix)
    write_csv(out / "objective.csv", OBJECTIVE_HEADER,
              [[t, value] for t, value in enumerate(result.objective_trace, start=1)])
    logger.info(f"Wrote graduated assignment results for {pair_path} to {out}")
    return result

