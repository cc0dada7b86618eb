"""Exhaustive reference checks for small instances."""

import itertools
import logging
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from config import Config
from exceptions import ConstraintViolationError, ProblemTooLargeError
from graphs import Graph, MatchPair

logger = logging.getLogger(__name__)


@dataclass
class OracleReport:
    verdict: Any
    witness: Optional[Any] = None

    def __bool__(self) -> bool:
        return bool(self.verdict)


def qap_objective(pair: MatchPair, S: np.ndarray) -> float:
    """Sum of A_s[i, i'] * A_t[j, j'] * S[i, j] * S[i', j'] over all index quadruples."""
    a_s = pair.source.dense_adjacency()
    a_t = pair.target.dense_adjacency()
    S = np.asarray(S, dtype=np.float64)
    n_s, n_t = a_s.shape[0], a_t.shape[0]
    total = 0.0
    for i, i2, j, j2 in itertools.product(range(n_s), range(n_s), range(n_t), range(n_t)):
        total += a_s[i, i2] * a_t[j, j2] * S[i, j] * S[i2, j2]
    return total


def is_isomorphism(g1: Graph, g2: Graph, mapping: np.ndarray) -> bool:
    """Whether node i of g1 -> mapping[i] of g2 maps the edge set of g1 exactly onto that of g2."""
    mapping = np.asarray(mapping)
    if g1.num_nodes != g2.num_nodes or g1.directed != g2.directed or g1.num_edges != g2.num_edges:
        return False
    if mapping.shape != (g1.num_nodes,) or np.unique(mapping).size != mapping.size:
        return False
    a1 = g1.dense_adjacency()
    a2 = g2.dense_adjacency()
    return bool(np.array_equal(a2[np.ix_(mapping, mapping)], a1))


def brute_force_isomorphism(g1: Graph, g2: Graph, max_nodes: int = Config.ORACLE_MAX_NODES) -> OracleReport:
    """
    Decide isomorphism by enumerating every node permutation.

    Returns:
        OracleReport whose witness is the first permutation (node i of g1 -> witness[i]) found

    Raises:
        ProblemTooLargeError: If either graph has more than max_nodes nodes
    """
    if max(g1.num_nodes, g2.num_nodes) > max_nodes:
        raise ProblemTooLargeError(
            f"Exhaustive isomorphism is limited to {max_nodes} nodes, got {g1.num_nodes} and {g2.num_nodes}"
        )
    if g1.num_nodes != g2.num_nodes or g1.num_edges != g2.num_edges or g1.directed != g2.directed:
        return OracleReport(False)
    if not np.array_equal(np.sort(g1.degrees()), np.sort(g2.degrees())):
        return OracleReport(False)
    for perm in itertools.permutations(range(g1.num_nodes)):
        mapping = np.array(perm, dtype=np.int64)
        if is_isomorphism(g1, g2, mapping):
            return OracleReport(True, mapping)
    return OracleReport(False)


def check_neighborhood_consensus(pair: MatchPair, S: np.ndarray) -> OracleReport:
    """
    Check that every matched node's neighbours are matched to neighbours of its partner.

    Args:
        pair: Graph pair
        S: Binary partial injection [n_s x n_t]

    Returns:
        OracleReport whose witness is the first violating triple (i, j, i')

    Raises:
        ConstraintViolationError: If S is not a 0/1 matrix with at most one 1 per row and column
    """
    S = np.asarray(S)
    expected = (pair.source.num_nodes, pair.target.num_nodes)
    if S.shape != expected:
        raise ConstraintViolationError(f"S has shape {S.shape}, expected {expected}")
    if not np.all((S == 0) | (S == 1)):
        raise ConstraintViolationError("S must be a 0/1 matrix")
    if np.any(S.sum(axis=1) > 1) or np.any(S.sum(axis=0) > 1):
        raise ConstraintViolationError("S must match every node at most once")

    for i, j in zip(*np.nonzero(S)):
        target_neighbors = pair.target.neighbors(j)
        for i2 in pair.source.neighbors(i):
            if not np.any(S[i2, target_neighbors] == 1):
                return OracleReport(False, (int(i), int(j), int(i2)))
    return OracleReport(True)
