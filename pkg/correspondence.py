"""
Soft correspondence matrices: scoring, normalization, sparsification, losses and metrics.

Dense correspondences are plain (n_s x n_t) tensors. Sparse correspondences
store, per source node, a fixed-width row of candidate target indices; slots
that are not part of the support (an unused ground-truth slot, or negatives
that could not be drawn) are masked out and receive probability zero.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import (
    Tensor,
    add,
    concat_rows,
    exp,
    gather_rows,
    log,
    log_row_softmax,
    matmul,
    reduce_sum,
    reshape,
    row_softmax,
    scale,
    select_entries,
    transpose,
)
from config import Config
from exceptions import GroundTruthNotInSupportError, ShapeMismatchError
from utils import write_csv

logger = logging.getLogger(__name__)

# Score offset for masked sparse slots; exp underflows to exactly zero.
MASKED_SCORE = -1e9
# Added inside the log of the likelihood so a vanished probability stays finite.
LOG_EPS = 1e-15

CORRESPONDENCE_HEADER = ["source_index", "rank", "target_index", "score"]
METRICS_HEADER = ["metric", "k", "value"]


def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class SparseCorrespondence:
    """
    Top-k support of a correspondence matrix.

    Attributes:
        num_targets: Number of target nodes |V_t|
        k: Number of top-scoring candidates per row
        indices: Candidate target index per (row, slot) [n_s x width]
        valid: Whether a slot belongs to the support [n_s x width]
        scores: Scores (raw or normalized) per slot [n_s x width]
        gt_appended: Rows whose ground truth was appended after the top-k slots
    """

    num_targets: int
    k: int
    indices: np.ndarray
    valid: np.ndarray
    scores: Tensor
    gt_appended: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.gt_appended is None:
            self.gt_appended = np.zeros(self.indices.shape[0], dtype=bool)
        if self.indices.shape != self.valid.shape or self.scores.shape != self.indices.shape:
            raise ShapeMismatchError(
                f"Sparse correspondence parts disagree: indices {self.indices.shape}, "
                f"valid {self.valid.shape}, scores {self.scores.shape}"
            )

    @property
    def num_sources(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    def with_scores(self, scores: Tensor) -> "SparseCorrespondence":
        return SparseCorrespondence(self.num_targets, self.k, self.indices, self.valid, scores, self.gt_appended)

    def flat_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """Source and target index of every slot in row-major order."""
        rows = np.repeat(np.arange(self.num_sources), self.width)
        return rows, self.indices.reshape(-1)

    def mask_bias(self) -> Tensor:
        return Tensor(np.where(self.valid, 0.0, MASKED_SCORE))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_sources, self.num_targets))
        rows, cols = np.nonzero(self.valid)
        dense[rows, self.indices[rows, cols]] = self.scores.values[rows, cols]
        return dense


Correspondence = Union[Tensor, SparseCorrespondence]


@dataclass
class SinkhornResult:
    matrix: Tensor
    iterations: int
    converged: bool
    deviation: float


def feature_match(h_s: Union[Tensor, np.ndarray], h_t: Union[Tensor, np.ndarray]) -> Tensor:
    """Initial scores S_hat = H_s H_t^T."""
    h_s, h_t = _as_tensor(h_s), _as_tensor(h_t)
    if h_s.values.ndim != 2 or h_t.values.ndim != 2 or h_s.shape[1] != h_t.shape[1]:
        raise ShapeMismatchError(f"feature_match: embeddings {h_s.shape} and {h_t.shape}")
    return matmul(h_s, transpose(h_t))


def sinkhorn_normalize(scores: Union[Tensor, np.ndarray], max_iters: int = Config.SINKHORN_MAX_ITERS,
                       tol: float = Config.SINKHORN_TOL) -> SinkhornResult:
    """
    Rectangular Sinkhorn normalization of exponentiated scores.

    The (n_s x n_t) score matrix is padded with n_t - n_s zero-score dummy
    rows to a square matrix, which is alternately column- and row-normalized
    in the log domain. Every iteration ends with a row pass, so the returned
    rows always sum to one; iteration stops once every column sum is within
    tol of one. Dummy rows are dropped on return and absorb the slack of the
    column constraint.

    Args:
        scores: Score matrix with n_s <= n_t
        max_iters: Maximum number of column/row passes
        tol: Tolerance on the column-sum deviation

    Returns:
        SinkhornResult with the normalized matrix and a convergence flag
    """
    scores = _as_tensor(scores)
    if scores.values.ndim != 2 or scores.shape[0] > scores.shape[1]:
        raise ShapeMismatchError(f"sinkhorn_normalize expects n_s <= n_t, got {scores.shape}")
    n_s, n_t = scores.shape
    log_alpha = scores
    if n_t > n_s:
        log_alpha = concat_rows([scores, Tensor(np.zeros((n_t - n_s, n_t)))])

    log_alpha = log_row_softmax(log_alpha)
    deviation = float(np.max(np.abs(np.exp(log_alpha.values).sum(axis=0) - 1.0)))
    iterations = 0
    while deviation >= tol and iterations < max_iters:
        log_alpha = transpose(log_row_softmax(transpose(log_alpha)))
        log_alpha = log_row_softmax(log_alpha)
        iterations += 1
        deviation = float(np.max(np.abs(np.exp(log_alpha.values).sum(axis=0) - 1.0)))

    # Non-finite scores give a nan deviation: no iterations, fault tag carried by the result.
    converged = deviation < tol
    if not converged and scores.fault is None:
        logger.warning(f"Sinkhorn stopped after {iterations} iterations with column deviation {deviation:.3e}")
    matrix = exp(log_alpha)
    if n_t > n_s:
        matrix = gather_rows(matrix, np.arange(n_s))
    return SinkhornResult(matrix, iterations, converged, deviation)


def row_softmax_normalize(scores: Union[Correspondence, np.ndarray]) -> Correspondence:
    """Row-wise softmax; sparse rows are normalized over their stored support."""
    if isinstance(scores, SparseCorrespondence):
        return scores.with_scores(row_softmax(add(scores.scores, scores.mask_bias())))
    return row_softmax(_as_tensor(scores))


def _top_indices(values: np.ndarray, k: int) -> np.ndarray:
    # Stable sort of negated scores: equal scores keep ascending index order.
    return np.argsort(-values, axis=1, kind="stable")[:, :k]


def topk_sparsify(scores: Union[Tensor, np.ndarray], k: int, gt: Optional[np.ndarray] = None,
                  num_negatives: int = 0, rng: Optional[np.random.Generator] = None) -> SparseCorrespondence:
    """
    Keep the k highest-scoring targets per source node.

    Args:
        scores: Dense score matrix [n_s x n_t]
        k: Number of candidates per row (1 <= k <= n_t)
        gt: Ground-truth targets; when given, a gt slot is appended and used
            by rows whose ground truth missed the top-k (training only)
        num_negatives: Extra uniformly sampled targets per row outside the
            candidates and the ground truth
        rng: Random generator for negative sampling

    Returns:
        SparseCorrespondence whose scores are differentiable views of the input
    """
    scores = _as_tensor(scores)
    n_s, n_t = scores.shape
    if not 1 <= k <= n_t:
        raise ValueError(f"k must lie in [1, {n_t}], got {k}")
    if num_negatives > 0 and rng is None:
        raise ValueError("A random generator is required for negative sampling")

    top = _top_indices(scores.values, k)
    columns: List[np.ndarray] = [top]
    valid: List[np.ndarray] = [np.ones_like(top, dtype=bool)]
    gt_appended = np.zeros(n_s, dtype=bool)
    if gt is not None:
        gt = np.asarray(gt, dtype=np.int64)
        if gt.shape != (n_s,):
            raise ShapeMismatchError(f"topk_sparsify: ground truth {gt.shape} for {n_s} source nodes")
        gt_appended = ~np.any(top == gt[:, None], axis=1)
        columns.append(gt[:, None])
        valid.append(gt_appended[:, None])
    if num_negatives > 0:
        negatives, neg_valid = _sample_negatives(np.concatenate(columns, axis=1), gt, n_t, num_negatives, rng)
        columns.append(negatives)
        valid.append(neg_valid)

    indices = np.concatenate(columns, axis=1)
    mask = np.concatenate(valid, axis=1)
    indices = np.where(mask, indices, 0)
    rows = np.repeat(np.arange(n_s), indices.shape[1])
    slot_scores = reshape(select_entries(scores, rows, indices.reshape(-1)), indices.shape)
    logger.debug(f"Sparsified {n_s}x{n_t} scores to width {indices.shape[1]} (gt appended in {gt_appended.sum()} rows)")
    return SparseCorrespondence(n_t, k, indices, mask, slot_scores, gt_appended)


def _sample_negatives(taken: np.ndarray, gt: Optional[np.ndarray], n_t: int, count: int,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n_s = taken.shape[0]
    negatives = np.zeros((n_s, count), dtype=np.int64)
    valid = np.zeros((n_s, count), dtype=bool)
    for i in range(n_s):
        excluded = set(taken[i].tolist())
        if gt is not None:
            excluded.add(int(gt[i]))
        pool = np.array([j for j in range(n_t) if j not in excluded], dtype=np.int64)
        drawn = rng.choice(pool, size=min(count, pool.size), replace=False) if pool.size else pool
        negatives[i, : drawn.size] = drawn
        valid[i, : drawn.size] = True
    return negatives, valid


def nll_loss(S: Correspondence, gt: np.ndarray, reduction: str = "sum") -> Tensor:
    """
    Negative log-likelihood of the ground-truth correspondences.

    Args:
        S: Row-normalized correspondence (dense tensor or sparse support)
        gt: Ground-truth target per source node
        reduction: "sum" or "mean" over source nodes

    Returns:
        Scalar loss tensor
    """
    gt = np.asarray(gt, dtype=np.int64)
    if isinstance(S, SparseCorrespondence):
        hits = (S.indices == gt[:, None]) & S.valid
        missing = np.flatnonzero(~hits.any(axis=1))
        if missing.size:
            raise GroundTruthNotInSupportError(
                f"Ground truth of {missing.size} source nodes is not stored (first: {int(missing[0])})"
            )
        likelihood = select_entries(S.scores, np.arange(S.num_sources), np.argmax(hits, axis=1))
    else:
        if gt.shape != (S.shape[0],):
            raise ShapeMismatchError(f"nll_loss: ground truth {gt.shape} for {S.shape[0]} source nodes")
        likelihood = select_entries(S, np.arange(S.shape[0]), gt)
    total = scale(reduce_sum(log(add(likelihood, Tensor(np.array(LOG_EPS))))), -1.0)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return scale(total, 1.0 / max(len(gt), 1))
    raise ValueError(f"Unknown reduction {reduction!r}")


def _dense_values(S: Union[Correspondence, np.ndarray]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(S, SparseCorrespondence):
        dense = np.full((S.num_sources, S.num_targets), -np.inf)
        rows, slots = np.nonzero(S.valid)
        dense[rows, S.indices[rows, slots]] = S.scores.values[rows, slots]
        return dense, np.isfinite(dense)
    values = S.values if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    return values, None


def ground_truth_ranks(S: Union[Correspondence, np.ndarray], gt: np.ndarray) -> np.ndarray:
    """
    Zero-based rank of each ground-truth target within its row.

    Ties are broken toward the lower target index. For sparse correspondences a
    ground truth outside the stored support gets rank n_t.
    """
    values, stored = _dense_values(S)
    gt = np.asarray(gt, dtype=np.int64)
    rows = np.arange(values.shape[0])
    target = values[rows, gt][:, None]
    columns = np.arange(values.shape[1])[None, :]
    ahead = (values > target) | ((values == target) & (columns < gt[:, None]))
    ranks = ahead.sum(axis=1)
    if stored is not None:
        ranks = np.where(stored[rows, gt], ranks, values.shape[1])
    return ranks


def hits_at_k(S: Union[Correspondence, np.ndarray], gt: np.ndarray, k: int) -> float:
    """Fraction of source nodes whose ground truth ranks within the top k of its row."""
    gt = np.asarray(gt)
    if gt.size == 0:
        return 0.0
    return float(np.mean(ground_truth_ranks(S, gt) < k))


def write_correspondence_csv(path: str, S: Union[Correspondence, np.ndarray], top: Optional[int] = None) -> int:
    """
    Dump a correspondence as (source_index, rank, target_index, score) rows.

    Args:
        path: Output CSV path
        S: Dense or sparse correspondence
        top: Number of ranked targets per source node (default: all stored)

    Returns:
        Number of rows written
    """
    values, stored = _dense_values(S)
    order = np.argsort(-values, axis=1, kind="stable")
    limit = values.shape[1] if top is None else min(top, values.shape[1])

    def rows() -> Iterable[Sequence]:
        for i in range(values.shape[0]):
            for rank, j in enumerate(order[i, :limit], start=1):
                if stored is not None and not stored[i, j]:
                    break
                yield [i, rank, int(j), float(values[i, j])]

    return write_csv(path, CORRESPONDENCE_HEADER, rows())


def write_metrics_csv(path: str, metrics: Iterable[Tuple[str, int, float]]) -> int:
    return write_csv(path, METRICS_HEADER, [[name, k, float(value)] for name, k, value in metrics])
