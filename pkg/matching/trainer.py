import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Adam, GradientTape, Tensor, add, arrays_to_manifest, manifest_to_arrays, scale
from config import Config
from correspondence import LOG_EPS, SparseCorrespondence, hits_at_k, nll_loss
from exceptions import CheckpointError, NumericFaultError
from graphs import MatchPair
from matching.consensus_refiner import ConsensusConfig, ConsensusRefiner
from matching.model import ModelConfig, ModelParams
from utils import derive_rng, write_csv, write_json

logger = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "eval_hits1_L0", "eval_hits1_Ltest"]

# Random stream ids passed to derive_rng
TRAIN_STREAM = 1
EVAL_STREAM = 2


@dataclass
class TrainConfig:
    learning_rate: float = Config.LEARNING_RATE
    epochs: int = Config.EPOCHS
    batch_size: int = Config.BATCH_SIZE
    regime: str = "joint"
    loss_weights: Tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.regime not in ("joint", "sequential"):
            raise ValueError(f"Unknown training regime {self.regime!r}")
        if len(self.loss_weights) != 2:
            raise ValueError("loss_weights holds one weight per loss term")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["loss_weights"] = list(self.loss_weights)
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TrainConfig":
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown training config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "loss_weights" in payload:
            payload["loss_weights"] = tuple(float(w) for w in payload["loss_weights"])
        return cls(**payload)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    eval_hits1_L0: float
    eval_hits1_Ltest: float


@dataclass
class EvalReport:
    """Metrics per number of refinement iterations: rows of (metric, k, value)."""

    num_iters: int
    rows: List[Tuple[str, int, float]] = field(default_factory=list)

    def value(self, metric: str, k: int) -> float:
        for name, row_k, value in self.rows:
            if name == metric and row_k == k:
                return value
        raise KeyError(f"No metric {metric} at k={k}")

    def hits(self, num_iters: int, k: int = 1) -> float:
        return self.value(f"hits_L{num_iters}", k)


class Trainer:
    """Supervised training of the two-stage matching model."""

    def __init__(self, model: ModelParams, train_config: TrainConfig, consensus_config: ConsensusConfig):
        train_config.validate()
        self.model = model
        self.config = train_config
        self.consensus = consensus_config
        self.refiner = ConsensusRefiner(model, consensus_config)

    def pair_loss(self, pair: MatchPair, rng: np.random.Generator, num_iters: int,
                  weights: Tuple[float, float]) -> Tensor:
        """
        Weighted L(initial) + L(refined) of one pair; each term is a mean over source nodes.

        Sparse models train on the top-k support plus a ground-truth slot
        (and random negatives when configured).
        """
        gt = pair.ground_truth
        training_gt = gt if self.consensus.sparse_k is not None else None
        result = self.refiner.refine(pair, num_iters, rng, training_gt=training_gt, record_trace=False)
        terms = []
        if weights[0]:
            terms.append(scale(nll_loss(result.initial, gt, "mean"), weights[0]))
        if weights[1] and num_iters > 0:
            terms.append(scale(nll_loss(result.final, gt, "mean"), weights[1]))
        if not terms:
            raise ValueError("Both loss terms are disabled")
        loss = terms[0]
        for term in terms[1:]:
            loss = add(loss, term)
        return loss

    def _run_epoch(self, dataset: Sequence[MatchPair], optimizer: Adam, epoch: int, num_iters: int,
                   weights: Tuple[float, float], checkpoint_path: Optional[str], frozen: bool = False) -> float:
        self.model.train()
        self._set_matching_frozen(frozen)
        order = derive_rng(self.config.seed, TRAIN_STREAM, epoch).permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), self.config.batch_size):
            batch = order[start:start + self.config.batch_size]
            optimizer.zero_grad()
            for index in batch:
                rng = derive_rng(self.config.seed, TRAIN_STREAM, epoch, int(index))
                with GradientTape() as tape:
                    loss = self.pair_loss(dataset[index], rng, num_iters, weights)
                if loss.fault:
                    if checkpoint_path:
                        save_checkpoint(checkpoint_path, self.model, self.consensus)
                    raise NumericFaultError(
                        f"Non-finite loss in epoch {epoch} on pair {int(index)} (first produced by {loss.fault})",
                        fault=loss.fault,
                    )
                tape.backward(loss)
                total += loss.item()
            optimizer.step(scale_grads=1.0 / len(batch))
        return total / max(len(dataset), 1)

    def train(self, dataset: Sequence[MatchPair], eval_set: Optional[Sequence[MatchPair]] = None,
              checkpoint_path: Optional[str] = None) -> List[HistoryRow]:
        """
        Train on a list of pairs.

        The joint regime minimizes L(initial) + L(refined) end to end with
        num_iters_train refinement iterations. The sequential regime first
        minimizes L(initial) for the configured epochs, then freezes the
        matching network and minimizes L(refined) for as many epochs again.

        Args:
            dataset: Training pairs
            eval_set: Optional pairs evaluated after every epoch
            checkpoint_path: Where to save the model if a numeric fault aborts training

        Returns:
            Per-epoch history rows
        """
        for pair in dataset:
            if pair.source.num_nodes > pair.target.num_nodes:
                raise ValueError("Every training pair needs |V_s| <= |V_t|")
        weights = tuple(self.config.loss_weights)
        num_iters = self.consensus.num_iters_train
        if self.config.regime == "joint":
            phases = [(self.model.named_parameters(), num_iters, weights)]
        else:
            phases = [
                (self.model.matching_parameters(), 0, (weights[0], 0.0)),
                (self.model.refinement_parameters(), num_iters, (0.0, weights[1])),
            ]

        history: List[HistoryRow] = []
        epoch = 0
        for phase, (params, phase_iters, phase_weights) in enumerate(phases):
            optimizer = Adam(params, self.config.learning_rate, Config.ADAM_BETA1, Config.ADAM_BETA2,
                             Config.ADAM_EPS)
            frozen = phase == 1
            for _ in range(self.config.epochs):
                epoch += 1
                train_loss = self._run_epoch(dataset, optimizer, epoch, phase_iters, phase_weights,
                                             checkpoint_path, frozen)
                row = HistoryRow(epoch, train_loss, float("nan"), float("nan"))
                if eval_set:
                    report_l0 = self.evaluate(eval_set, 0)
                    report = self.evaluate(eval_set, self.consensus.num_iters_test)
                    row.eval_hits1_L0 = report_l0.hits(0)
                    row.eval_hits1_Ltest = report.hits(self.consensus.num_iters_test)
                history.append(row)
                logger.info(f"Epoch {epoch}: train loss {train_loss:.4f}, eval Hits@1 "
                            f"L0={row.eval_hits1_L0:.3f} Ltest={row.eval_hits1_Ltest:.3f}")
        self._set_matching_frozen(False)
        return history

    def _set_matching_frozen(self, frozen: bool) -> None:
        for tensor in self.model.matching_parameters().values():
            tensor.requires_grad = not frozen
        if frozen:
            self.model.psi1.eval()

    def evaluate(self, dataset: Sequence[MatchPair], num_iters: Optional[int] = None,
                 ks: Sequence[int] = (1, 10)) -> EvalReport:
        """
        Hits@k of the first-stage matching (L=0) and after num_iters refinement iterations.

        Runs in eval mode with per-pair random streams, so repeated calls give
        identical reports. The L=0 row is always the dense first-stage matching.
        """
        num_iters = self.consensus.num_iters_test if num_iters is None else num_iters
        was_training = self.model.training
        self.model.eval()
        per_level: Dict[int, List[Tuple[float, List[float]]]] = {0: [], num_iters: []}
        try:
            for index, pair in enumerate(dataset):
                rng = derive_rng(self.config.seed, EVAL_STREAM, index)
                initial = self.refiner.matcher.normalize(self.refiner.matcher.initial_scores(pair, rng))
                gt = pair.ground_truth
                per_level[0].append(_pair_metrics(initial, gt, ks))
                if num_iters > 0:
                    result = self.refiner.refine(pair, num_iters, rng, record_trace=False)
                    per_level[num_iters].append(_pair_metrics(result.final, gt, ks))
        finally:
            self.model.train(was_training)

        report = EvalReport(num_iters)
        for level in sorted(per_level):
            entries = per_level[level]
            if not entries:
                continue
            report.rows.append((f"nll_L{level}", 0, float(np.mean([e[0] for e in entries]))))
            for position, k in enumerate(ks):
                report.rows.append((f"hits_L{level}", k, float(np.mean([e[1][position] for e in entries]))))
        return report


def _pair_metrics(S, gt: np.ndarray, ks: Sequence[int]) -> Tuple[float, List[float]]:
    dense = S.to_dense() if isinstance(S, SparseCorrespondence) else S.values
    likelihood = dense[np.arange(dense.shape[0]), gt]
    with np.errstate(divide="ignore"):
        nll = float(-np.mean(np.log(likelihood + LOG_EPS)))
    return nll, [hits_at_k(S, gt, k) for k in ks]


def train(dataset: Sequence[MatchPair], model: ModelParams, train_config: TrainConfig,
          consensus_config: ConsensusConfig, eval_set: Optional[Sequence[MatchPair]] = None,
          checkpoint_path: Optional[str] = None) -> Tuple[ModelParams, List[HistoryRow]]:
    history = Trainer(model, train_config, consensus_config).train(dataset, eval_set, checkpoint_path)
    return model, history


def evaluate(dataset: Sequence[MatchPair], model: ModelParams, consensus_config: ConsensusConfig,
             num_iters: Optional[int] = None, seed: int = 0, ks: Sequence[int] = (1, 10)) -> EvalReport:
    return Trainer(model, TrainConfig(seed=seed), consensus_config).evaluate(dataset, num_iters, ks)


def write_history_csv(path: str, history: Sequence[HistoryRow]) -> int:
    return write_csv(path, HISTORY_HEADER,
                     [[r.epoch, r.train_loss, r.eval_hits1_L0, r.eval_hits1_Ltest] for r in history])


def save_checkpoint(path: str, model: ModelParams, consensus_config: Optional[ConsensusConfig] = None) -> None:
    """
    Save architecture, parameters and normalization buffers as JSON.

    Args:
        path: Checkpoint file path
        model: Model to save
        consensus_config: Refinement settings stored alongside for reference
    """
    payload = {
        "format_version": Config.CHECKPOINT_FORMAT_VERSION,
        "model": model.config.to_dict(),
        "consensus": consensus_config.to_dict() if consensus_config else None,
        "parameters": arrays_to_manifest({n: t.values for n, t in model.named_parameters().items()}),
        "buffers": arrays_to_manifest(model.named_buffers()),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_json(path, payload)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[ModelParams, Optional[ConsensusConfig]]:
    """
    Rebuild a model from a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: If the file is missing, malformed or of another format version
    """
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}") from e

    version = payload.get("format_version")
    if version != Config.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint format version {version} is not supported "
                              f"(expected {Config.CHECKPOINT_FORMAT_VERSION})")
    try:
        model = ModelParams(ModelConfig.from_dict(payload["model"]), np.random.default_rng(0))
        _assign(model.named_parameters(), manifest_to_arrays(payload["parameters"]), "parameter")
        buffers = model.named_buffers()
        for name, values in manifest_to_arrays(payload["buffers"]).items():
            if name not in buffers or buffers[name].shape != values.shape:
                raise CheckpointError(f"Checkpoint buffer {name} does not fit the model")
            buffers[name][...] = values
        consensus = payload.get("consensus")
        return model, ConsensusConfig.from_dict(consensus) if consensus else None
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} does not match its architecture: {e}") from e


def _assign(params: Dict[str, Tensor], arrays: Dict[str, np.ndarray], kind: str) -> None:
    missing = set(params) - set(arrays)
    if missing:
        raise CheckpointError(f"Checkpoint lacks {kind}s {sorted(missing)}")
    for name, values in arrays.items():
        if name not in params or params[name].shape != values.shape:
            raise CheckpointError(f"Checkpoint {kind} {name} does not fit the model")
        params[name].values[...] = values

