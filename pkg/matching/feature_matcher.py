import logging
from typing import Optional

import numpy as np

from autodiff import Tensor
from correspondence import (
    Correspondence,
    SparseCorrespondence,
    feature_match,
    row_softmax_normalize,
    sinkhorn_normalize,
    topk_sparsify,
)
from graphs import MatchPair
from matching.model import ModelParams, node_features

logger = logging.getLogger(__name__)


class FeatureMatcher:
    """First stage: local feature matching through node embeddings of Psi_theta1."""

    def __init__(self, model: ModelParams, normalization: str = "sinkhorn", sparse_k: Optional[int] = None,
                 num_negatives: int = 0, sinkhorn_max_iters: int = 100, sinkhorn_tol: float = 1e-6):
        if normalization not in ("sinkhorn", "row_softmax"):
            raise ValueError(f"Unknown normalization {normalization!r}")
        if sparse_k is not None and normalization != "row_softmax":
            raise ValueError("Sparse correspondences are normalized with row_softmax")
        self.model = model
        self.normalization = normalization
        self.sparse_k = sparse_k
        self.num_negatives = num_negatives
        self.sinkhorn_max_iters = sinkhorn_max_iters
        self.sinkhorn_tol = sinkhorn_tol

    def initial_scores(self, pair: MatchPair, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Dense scores S_hat(0) = H_s H_t^T."""
        h_s = self.model.psi1(node_features(pair.source), pair.source, rng)
        h_t = self.model.psi1(node_features(pair.target), pair.target, rng)
        return feature_match(h_s, h_t)

    def sparsify(self, scores: Tensor, gt: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None) -> Correspondence:
        """
        Restrict dense scores to their top-k support when a sparse k is configured.

        Args:
            scores: Dense initial scores
            gt: Ground truth to append as a training-only slot (None at test time)
            rng: Random generator for negative samples

        Returns:
            The dense scores unchanged, or a SparseCorrespondence
        """
        if self.sparse_k is None:
            return scores
        k = min(self.sparse_k, scores.shape[1])
        negatives = self.num_negatives if gt is not None else 0
        return topk_sparsify(scores, k, gt=gt, num_negatives=negatives, rng=rng)

    def normalize(self, scores: Correspondence) -> Correspondence:
        if isinstance(scores, SparseCorrespondence) or self.normalization == "row_softmax":
            return row_softmax_normalize(scores)
        return sinkhorn_normalize(scores, self.sinkhorn_max_iters, self.sinkhorn_tol).matrix
