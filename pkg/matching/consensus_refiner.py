"""
Second stage: iterative neighborhood-consensus refinement of soft correspondences.

Each iteration normalizes the current scores, distributes node indicator
functions R_s from the source graph to the target graph along the soft
correspondences (R_t = S^T R_s), runs the consensus network on both graphs
and adds Phi(o_s[i] - o_t[j]) to the score of every stored pair (i, j).
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from autodiff import (
    Tensor,
    add,
    elementwise_mul,
    gather_rows,
    matmul,
    reshape,
    scatter_add_rows,
    sub,
    transpose,
)
from config import Config
from correspondence import LOG_EPS, Correspondence, SparseCorrespondence, hits_at_k
from exceptions import ShapeMismatchError
from gnn import Gnn, Mlp
from graphs import MatchPair
from matching.feature_matcher import FeatureMatcher
from matching.model import ModelParams
from utils import write_csv

logger = logging.getLogger(__name__)

TRACE_HEADER = ["iteration", "loss", "hits1", "mean_d_norm"]


@dataclass
class ConsensusConfig:
    """Refinement settings shared by training and evaluation."""

    num_iters_train: int = Config.NUM_ITERS_TRAIN
    num_iters_test: int = Config.NUM_ITERS_TEST
    indicator: str = "random"
    random_dim: int = Config.RANDOM_INDICATOR_DIM
    normalization: str = "sinkhorn"
    sparse_k: Optional[int] = None
    num_negatives: int = 0
    sinkhorn_max_iters: int = Config.SINKHORN_MAX_ITERS
    sinkhorn_tol: float = Config.SINKHORN_TOL

    def validate(self) -> None:
        if self.num_iters_train < 0 or self.num_iters_train > self.num_iters_test:
            raise ValueError(f"Need 0 <= num_iters_train <= num_iters_test, got "
                             f"{self.num_iters_train} and {self.num_iters_test}")
        if self.indicator not in ("identity", "random"):
            raise ValueError(f"Unknown indicator kind {self.indicator!r}")
        if self.indicator == "random" and self.random_dim < 1:
            raise ValueError("random_dim must be >= 1 for random indicators")
        if self.normalization not in ("sinkhorn", "row_softmax"):
            raise ValueError(f"Unknown normalization {self.normalization!r}")
        if self.sparse_k is not None:
            if self.sparse_k < 1:
                raise ValueError("sparse_k must be >= 1")
            if self.normalization != "row_softmax":
                raise ValueError("Sparse refinement requires row_softmax normalization")
        if self.num_negatives < 0:
            raise ValueError("num_negatives must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ConsensusConfig":
        unknown = set(payload) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown consensus config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class ConsensusState:
    """
    Intermediate values of one consensus step.

    d holds o_s[rows[k]] - o_t[cols[k]] for every stored pair k, in the
    row-major order of the correspondence support.
    """

    scores: Correspondence
    o_s: Tensor
    o_t: Tensor
    d: Tensor
    rows: np.ndarray
    cols: np.ndarray


@dataclass
class TraceRow:
    iteration: int
    loss: float
    hits1: float
    mean_d_norm: float


@dataclass
class RefineResult:
    initial: Correspondence
    final: Correspondence
    scores: Correspondence
    trace: List[TraceRow] = field(default_factory=list)
    last_state: Optional[ConsensusState] = None


def support_pairs(S: Correspondence) -> Tuple[np.ndarray, np.ndarray]:
    """Source/target index of every stored entry in row-major order."""
    if isinstance(S, SparseCorrespondence):
        return S.flat_pairs()
    n_s, n_t = S.shape
    return np.repeat(np.arange(n_s), n_t), np.tile(np.arange(n_t), n_s)


def draw_indicators(num_nodes: int, kind: str, dim: int, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Node indicator functions R_s.

    Identity indicators are the first num_nodes columns of an identity matrix
    padded to width dim; random indicators are standard Gaussian draws.
    """
    if kind == "identity":
        if num_nodes > dim:
            raise ShapeMismatchError(f"Identity indicators need width >= {num_nodes}, network expects {dim}")
        return Tensor(np.eye(num_nodes, dim))
    if rng is None:
        raise ValueError("Random indicators need a random generator")
    return Tensor(rng.standard_normal((num_nodes, dim)))


def map_functions(S: Correspondence, x_s: Tensor) -> Tensor:
    """
    Pass node functions from the source to the target graph: x_t = S^T x_s.

    Sparse correspondences contract their stored entries only.
    """
    x_s = x_s if isinstance(x_s, Tensor) else Tensor(x_s)
    if isinstance(S, SparseCorrespondence):
        if x_s.shape[0] != S.num_sources:
            raise ShapeMismatchError(f"map_functions: {x_s.shape[0]} rows for {S.num_sources} source nodes")
        rows, cols = S.flat_pairs()
        weights = elementwise_mul(reshape(S.scores, (rows.size, 1)),
                                  Tensor(S.valid.reshape(-1, 1).astype(np.float64)))
        return scatter_add_rows(elementwise_mul(gather_rows(x_s, rows), weights), cols, S.num_targets)
    if x_s.shape[0] != S.shape[0]:
        raise ShapeMismatchError(f"map_functions: {x_s.shape[0]} rows for {S.shape[0]} source nodes")
    return matmul(transpose(S), x_s)


def consensus_vectors(S: Correspondence, r_s: Tensor, pair: MatchPair, psi2: Gnn) -> ConsensusState:
    """
    Distribute indicators along S and compare the resulting colorings.

    Args:
        S: Normalized correspondence
        r_s: Indicator functions on the source graph
        pair: Graph pair
        psi2: Consensus network

    Returns:
        ConsensusState with O_s, O_t and the consensus vectors d of all stored pairs
    """
    r_t = map_functions(S, r_s)
    o_s = psi2(r_s, pair.source)
    o_t = psi2(r_t, pair.target)
    rows, cols = support_pairs(S)
    d = sub(gather_rows(o_s, rows), gather_rows(o_t, cols))
    return ConsensusState(S, o_s, o_t, d, rows, cols)


def consensus_step(scores: Correspondence, pair: MatchPair, psi2: Gnn, phi: Mlp, cfg: ConsensusConfig,
                   normalize, rng: Optional[np.random.Generator] = None,
                   normalized: Optional[Correspondence] = None) -> Tuple[Correspondence, ConsensusState]:
    """
    One refinement iteration: S_hat[i][j] += Phi(o_s[i] - o_t[j]) for every stored pair.

    Args:
        scores: Current unnormalized scores S_hat
        pair: Graph pair
        psi2: Consensus network
        phi: Update network mapping a consensus vector to a scalar
        cfg: Refinement settings (indicator kind and width)
        normalize: Normalization applied at the loop head
        rng: Random generator for random indicators
        normalized: Already normalized scores, to skip the loop-head normalization

    Returns:
        Updated scores and the consensus state of this iteration
    """
    S = normalized if normalized is not None else normalize(scores)
    r_s = draw_indicators(pair.source.num_nodes, cfg.indicator, psi2.in_dim, rng)
    state = consensus_vectors(S, r_s, pair, psi2)
    raw = scores.scores if isinstance(scores, SparseCorrespondence) else scores
    update = reshape(phi(state.d), raw.shape)
    updated = add(raw, update)
    if isinstance(scores, SparseCorrespondence):
        return scores.with_scores(updated), state
    return updated, state


def _dense_view(S: Correspondence) -> np.ndarray:
    return S.to_dense() if isinstance(S, SparseCorrespondence) else S.values


def _trace_row(iteration: int, S: Correspondence, gt: np.ndarray, state: Optional[ConsensusState]) -> TraceRow:
    dense = _dense_view(S)
    likelihood = dense[np.arange(dense.shape[0]), gt]
    loss = float(-np.mean(np.log(likelihood + LOG_EPS))) if gt.size else float("nan")
    mean_d = float("nan")
    if state is not None:
        on_gt = state.cols == gt[state.rows]
        if isinstance(S, SparseCorrespondence):
            on_gt &= S.valid.reshape(-1)
        if on_gt.any():
            mean_d = float(np.mean(np.linalg.norm(state.d.values[on_gt], axis=1)))
    return TraceRow(iteration, loss, hits_at_k(S, gt, 1), mean_d)


class ConsensusRefiner:
    """Runs feature matching followed by L consensus iterations."""

    def __init__(self, model: ModelParams, config: ConsensusConfig):
        config.validate()
        if config.indicator == "random" and config.random_dim != model.psi2.in_dim:
            raise ShapeMismatchError(f"Random indicators of width {config.random_dim} do not fit a consensus "
                                     f"network with input width {model.psi2.in_dim}")
        self.model = model
        self.config = config
        self.matcher = FeatureMatcher(model, config.normalization, config.sparse_k, config.num_negatives,
                                      config.sinkhorn_max_iters, config.sinkhorn_tol)

    def refine(self, pair: MatchPair, num_iters: int, rng: Optional[np.random.Generator] = None,
               training_gt: Optional[np.ndarray] = None, record_trace: bool = True) -> RefineResult:
        """
        Match a pair and refine the correspondence num_iters times.

        Args:
            pair: Graph pair with ground truth (used for the trace only)
            num_iters: Number of consensus iterations L
            rng: Random generator for dropout, negatives and random indicators
            training_gt: Ground truth for the training-only sparse slot
            record_trace: Whether to compute per-iteration loss and Hits@1

        Returns:
            RefineResult with the first-stage and final normalized correspondences
        """
        if num_iters < 0:
            raise ValueError("num_iters must be >= 0")
        dense_scores = self.matcher.initial_scores(pair, rng)
        scores = self.matcher.sparsify(dense_scores, training_gt, rng)
        S = self.matcher.normalize(scores)
        result = RefineResult(initial=S, final=S, scores=scores)
        gt = pair.ground_truth
        if record_trace:
            result.trace.append(_trace_row(0, S, gt, None))

        state = None
        for iteration in range(1, num_iters + 1):
            scores, state = consensus_step(scores, pair, self.model.psi2, self.model.phi, self.config,
                                           self.matcher.normalize, rng, normalized=S)
            S = self.matcher.normalize(scores)
            if record_trace:
                row = _trace_row(iteration, S, gt, state)
                result.trace.append(row)
                logger.debug(f"Iteration {iteration}: loss={row.loss:.4f} hits1={row.hits1:.3f} "
                             f"mean_d={row.mean_d_norm:.4f}")
        result.final = S
        result.scores = scores
        result.last_state = state
        return result


def refine(pair: MatchPair, params: ModelParams, cfg: ConsensusConfig, num_iters: int,
           rng: Optional[np.random.Generator] = None) -> RefineResult:
    return ConsensusRefiner(params, cfg).refine(pair, num_iters, rng)


def write_trace_csv(path: str, trace: List[TraceRow]) -> int:
    return write_csv(path, TRACE_HEADER, [[r.iteration, r.loss, r.hits1, r.mean_d_norm] for r in trace])
