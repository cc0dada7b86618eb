"""Graph representation, random generation and the structural perturbations of the synthetic experiments."""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

from config import Config
from exceptions import InvalidProbabilityError

logger = logging.getLogger(__name__)


def edge_feature_matrix(values: Any, num_edges: int) -> np.ndarray:
    """
    Coerce edge features to a [num_edges x f] float matrix.

    Accepts a matrix with one row per edge, one scalar per edge, or an empty
    list for a graph without edges (giving shape [0 x 0]).

    Raises:
        ValueError: If the features do not provide one row per edge
    """
    features = np.asarray(values, dtype=np.float64)
    if features.ndim == 2 and features.shape[0] == num_edges:
        return features
    if features.size == 0 and num_edges == 0:
        return np.zeros((0, features.shape[1] if features.ndim == 2 else 0))
    if features.ndim == 1 and features.size == num_edges:
        return features.reshape(num_edges, 1)
    raise ValueError(f"edge_features must have one row per edge ({num_edges}), got shape {features.shape}")


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Immutable graph with optional node and edge features.

    Edges are stored as a lexicographically sorted (E, 2) integer array of
    ordered pairs (i, j). Undirected graphs store both directions of every
    edge. A compressed row index over out-neighbours is built once at
    construction.
    """

    num_nodes: int
    edges: np.ndarray
    directed: bool = False
    node_features: Optional[np.ndarray] = None
    edge_features: Optional[np.ndarray] = None
    indptr: np.ndarray = field(init=False, repr=False, compare=False)
    indices: np.ndarray = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_nodes < 0:
            raise ValueError(f"num_nodes must be non-negative, got {self.num_nodes}")
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        edge_features = None
        if self.edge_features is not None:
            edge_features = edge_feature_matrix(self.edge_features, len(edges))

        if len(edges):
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError(f"Edge endpoint outside [0, {self.num_nodes})")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if edge_features is not None:
                edge_features = edge_features[order]
            if np.any(np.all(edges[1:] == edges[:-1], axis=1)):
                raise ValueError("Duplicate edges are not allowed")
        if not self.directed:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("Undirected graphs may not contain self-loops")
            forward = set(map(tuple, edges.tolist()))
            if any((j, i) not in forward for i, j in forward):
                raise ValueError("Undirected edge list must be closed under reversal")

        node_features = self.node_features
        if node_features is not None:
            node_features = np.asarray(node_features, dtype=np.float64)
            if node_features.ndim != 2 or node_features.shape[0] != self.num_nodes:
                raise ValueError(
                    f"node_features must have shape [{self.num_nodes} x f], got {node_features.shape}"
                )

        counts = np.bincount(edges[:, 0], minlength=self.num_nodes) if len(edges) else np.zeros(self.num_nodes, dtype=np.int64)
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])

        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_features", edge_features)
        object.__setattr__(self, "node_features", node_features)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", edges[:, 1].copy())
        object.__setattr__(self, "_cache", {})
        for array in (self.edges, self.indptr, self.indices):
            array.setflags(write=False)

    @classmethod
    def from_pairs(cls, num_nodes: int, pairs: Sequence[Tuple[int, int]], directed: bool = False,
                   node_features: Optional[np.ndarray] = None,
                   edge_features: Optional[np.ndarray] = None) -> "Graph":
        """
        Build a graph from a list of node pairs.

        For undirected graphs each pair is stored in both directions and both
        directions carry the pair's edge features. A pair listed twice keeps
        the features of its first occurrence.
        """
        pairs = np.array([(int(i), int(j)) for i, j in pairs], dtype=np.int64).reshape(-1, 2)
        features = None if edge_features is None else edge_feature_matrix(edge_features, len(pairs))
        if not directed and len(pairs):
            pairs = np.vstack([pairs, pairs[:, ::-1]])
            pairs, first = np.unique(pairs, axis=0, return_index=True)
            if features is not None:
                features = np.vstack([features, features])[first]
        return cls(num_nodes, pairs, directed, node_features, features)

    @property
    def num_edges(self) -> int:
        return int(len(self.edges))

    def neighbors(self, i: int) -> np.ndarray:
        """Out-neighbours of node i (all neighbours for undirected graphs)."""
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        """Out-degree of every node (degree for undirected graphs)."""
        return np.diff(self.indptr)

    def adjacency(self) -> sp.csr_matrix:
        """Sparse adjacency with A[i, j] = 1 iff (i, j) is an edge."""
        if "out" not in self._cache:
            data = np.ones(self.num_edges, dtype=np.float64)
            self._cache["out"] = sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.num_nodes, self.num_nodes))
        return self._cache["out"]

    def in_adjacency(self) -> sp.csr_matrix:
        """Transposed adjacency: row i lists the sources of edges j -> i."""
        if "in" not in self._cache:
            self._cache["in"] = self.adjacency().T.tocsr()
        return self._cache["in"]

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency().toarray()

    def undirected_pairs(self) -> np.ndarray:
        """Each undirected edge once, as (i, j) with i < j."""
        mask = self.edges[:, 0] < self.edges[:, 1]
        return self.edges[mask]

    def undirected_edge_features(self) -> Optional[np.ndarray]:
        """Edge features aligned with undirected_pairs() (None without edge features)."""
        if self.edge_features is None:
            return None
        return self.edge_features[self.edges[:, 0] < self.edges[:, 1]]

    def with_node_features(self, node_features: Optional[np.ndarray]) -> "Graph":
        return Graph(self.num_nodes, self.edges, self.directed, node_features, self.edge_features)


@dataclass(frozen=True, eq=False)
class MatchPair:
    """A source graph, a target graph and the injective ground-truth mapping between them."""

    source: Graph
    target: Graph
    ground_truth: np.ndarray

    def __post_init__(self):
        gt = np.array(self.ground_truth, dtype=np.int64)
        if self.source.num_nodes > self.target.num_nodes:
            raise ValueError(
                f"Source has {self.source.num_nodes} nodes but target only {self.target.num_nodes}"
            )
        if gt.shape != (self.source.num_nodes,):
            raise ValueError(f"ground_truth must have length {self.source.num_nodes}, got {gt.shape}")
        if len(gt) and (gt.min() < 0 or gt.max() >= self.target.num_nodes):
            raise ValueError("ground_truth maps outside the target node range")
        if len(np.unique(gt)) != len(gt):
            raise ValueError("ground_truth must be injective")
        gt.setflags(write=False)
        object.__setattr__(self, "ground_truth", gt)


@dataclass
class SyntheticConfig:
    """Parameters of one synthetic graph-pair family."""

    num_source_nodes: int = Config.NUM_SOURCE_NODES
    edge_prob: float = Config.EDGE_PROB
    edge_removal_prob: float = 0.0
    node_addition_frac: float = 0.0
    seed: int = 0
    max_degree: int = Config.MAX_DEGREE
    shuffle_target: bool = True

    def validate(self) -> None:
        if self.num_source_nodes < 1:
            raise ValueError("num_source_nodes must be >= 1")
        if not 0.0 < self.edge_prob <= 1.0:
            raise InvalidProbabilityError(f"edge_prob must lie in (0, 1], got {self.edge_prob}")
        if not 0.0 <= self.edge_removal_prob < 1.0:
            raise InvalidProbabilityError(f"edge_removal_prob must lie in [0, 1), got {self.edge_removal_prob}")
        if not 0.0 <= self.node_addition_frac < 1.0:
            raise InvalidProbabilityError(f"node_addition_frac must lie in [0, 1), got {self.node_addition_frac}")
        if self.edge_removal_prob > 0 and self.node_addition_frac > 0:
            raise ValueError("Only one of edge_removal_prob and node_addition_frac may be nonzero")
        if self.max_degree < 0:
            raise ValueError("max_degree must be non-negative")


def generate_erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    """
    Sample an undirected Erdos-Renyi graph G(n, p).

    Args:
        n: Number of nodes
        p: Edge probability in (0, 1]
        rng: Random generator owned by the caller

    Returns:
        Undirected graph without self-loops
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 < p <= 1.0:
        raise InvalidProbabilityError(f"Edge probability must lie in (0, 1], got {p}")
    rows, cols = np.triu_indices(n, k=1)
    keep = rng.random(len(rows)) < p
    return Graph.from_pairs(n, list(zip(rows[keep].tolist(), cols[keep].tolist())))


def perturb_remove_edges(g: Graph, p_s: float, rng: np.random.Generator) -> Tuple[Graph, np.ndarray]:
    """
    Remove edges with probability p_s without isolating any node.

    Every undirected edge is marked independently with probability p_s.
    Marked edges are visited in a random order and removed only if both
    endpoints keep at least one edge.

    Args:
        g: Undirected input graph
        p_s: Removal probability in [0, 1)
        rng: Random generator owned by the caller

    Returns:
        Tuple of (perturbed graph, identity ground truth)
    """
    if g.directed:
        raise ValueError("perturb_remove_edges expects an undirected graph")
    if not 0.0 <= p_s < 1.0:
        raise InvalidProbabilityError(f"p_s must lie in [0, 1), got {p_s}")

    pairs = g.undirected_pairs()
    marked = rng.random(len(pairs)) < p_s
    order = rng.permutation(len(pairs))
    degree = g.degrees().copy()
    keep = np.ones(len(pairs), dtype=bool)
    for e in order:
        if not marked[e]:
            continue
        i, j = pairs[e]
        if degree[i] > 1 and degree[j] > 1:
            keep[e] = False
            degree[i] -= 1
            degree[j] -= 1

    removed = int((~keep).sum())
    logger.debug(f"Removed {removed}/{len(pairs)} edges ({int(marked.sum())} marked)")
    features = g.undirected_edge_features()
    perturbed = Graph.from_pairs(g.num_nodes, pairs[keep].tolist(), node_features=g.node_features,
                                 edge_features=features[keep] if features is not None else None)
    return perturbed, np.arange(g.num_nodes, dtype=np.int64)


def perturb_add_nodes(g: Graph, q: float, p: float, rng: np.random.Generator) -> MatchPair:
    """
    Build a pair whose target is the source plus floor(q * n) noisy nodes.

    Each new node is connected to every other node (old and new) with
    probability p. New nodes and new edges get zero features.

    Args:
        g: Undirected source graph
        q: Fraction of added nodes in [0, 1)
        p: Edge probability for the new nodes
        rng: Random generator owned by the caller

    Returns:
        MatchPair with identity ground truth on the original nodes
    """
    if g.directed:
        raise ValueError("perturb_add_nodes expects an undirected graph")
    if not 0.0 <= q < 1.0:
        raise InvalidProbabilityError(f"q must lie in [0, 1), got {q}")
    if not 0.0 < p <= 1.0:
        raise InvalidProbabilityError(f"Edge probability must lie in (0, 1], got {p}")

    n = g.num_nodes
    added = int(math.floor(q * n))
    total = n + added
    pairs = [tuple(e) for e in g.undirected_pairs().tolist()]
    for u in range(n, total):
        # u pairs with every node below it, so each new pair is sampled once
        hits = np.flatnonzero(rng.random(u) < p)
        pairs.extend((int(v), u) for v in hits)

    node_features = None
    if g.node_features is not None:
        node_features = np.vstack([g.node_features, np.zeros((added, g.node_features.shape[1]))])
    edge_features = g.undirected_edge_features()
    if edge_features is not None:
        new_edges = len(pairs) - len(edge_features)
        edge_features = np.vstack([edge_features, np.zeros((new_edges, edge_features.shape[1]))])
    target = Graph.from_pairs(total, pairs, node_features=node_features, edge_features=edge_features)
    logger.debug(f"Added {added} nodes and {target.num_edges // 2 - g.num_edges // 2} edges")
    return MatchPair(g, target, np.arange(n, dtype=np.int64))


def degree_one_hot(g: Graph, max_degree: int) -> np.ndarray:
    """
    One-hot encode node degrees, clamping degrees above max_degree.

    Args:
        g: Input graph
        max_degree: Largest encoded degree; the matrix has max_degree + 1 columns

    Returns:
        Matrix [num_nodes x (max_degree + 1)]
    """
    degree = g.degrees()
    if len(degree) and degree.max() > max_degree:
        logger.debug(f"Clamping degrees above {max_degree} (max degree {degree.max()})")
    features = np.zeros((g.num_nodes, max_degree + 1), dtype=np.float64)
    features[np.arange(g.num_nodes), np.minimum(degree, max_degree)] = 1.0
    return features


def t_hop_neighborhood(g: Graph, i: int, T: int) -> Set[int]:
    """
    Nodes within shortest-path distance T of node i, including i.

    Edge direction is ignored so that the set matches the receptive field of
    operators that read both in- and out-edges.
    """
    if not 0 <= i < g.num_nodes:
        raise ValueError(f"Node {i} outside [0, {g.num_nodes})")
    if g.directed:
        undirected = g.adjacency() + g.in_adjacency()
        indptr, indices = undirected.indptr, undirected.indices
    else:
        indptr, indices = g.indptr, g.indices

    distance = {i: 0}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if distance[u] == T:
            continue
        for v in indices[indptr[u]:indptr[u + 1]]:
            v = int(v)
            if v not in distance:
                distance[v] = distance[u] + 1
                queue.append(v)
    return set(distance)


def induced_subgraph(g: Graph, s: Set[int]) -> Tuple[Graph, Dict[int, int]]:
    """
    Subgraph induced by a node set.

    Args:
        g: Input graph
        s: Node subset

    Returns:
        Tuple of (subgraph, mapping from old to new node index)
    """
    nodes = sorted(int(v) for v in s)
    if nodes and (nodes[0] < 0 or nodes[-1] >= g.num_nodes):
        raise ValueError("Node set contains indices outside the graph")
    index = {old: new for new, old in enumerate(nodes)}
    member = np.zeros(g.num_nodes, dtype=bool)
    member[nodes] = True
    mask = member[g.edges[:, 0]] & member[g.edges[:, 1]] if g.num_edges else np.zeros(0, dtype=bool)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    edges = remap[g.edges[mask]] if g.num_edges else np.zeros((0, 2), dtype=np.int64)
    node_features = g.node_features[nodes] if g.node_features is not None else None
    edge_features = g.edge_features[mask] if g.edge_features is not None else None
    return Graph(len(nodes), edges, g.directed, node_features, edge_features), index


def permute_graph(g: Graph, perm: np.ndarray) -> Graph:
    """
    Relabel nodes so that old node i becomes node perm[i].

    Node features move with their nodes, i.e. the result has adjacency
    P^T A P for the permutation matrix P with P[i, perm[i]] = 1.
    """
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(g.num_nodes)):
        raise ValueError("perm must be a permutation of the node indices")
    edges = perm[g.edges] if g.num_edges else g.edges
    node_features = None
    if g.node_features is not None:
        node_features = np.empty_like(g.node_features)
        node_features[perm] = g.node_features
    return Graph(g.num_nodes, edges, g.directed, node_features, g.edge_features)


def match_pair_from_permutation(g: Graph, perm: np.ndarray) -> MatchPair:
    """Planted-isomorphism pair (g, permute_graph(g, perm)) with ground truth perm."""
    return MatchPair(g, permute_graph(g, perm), np.asarray(perm, dtype=np.int64))


def build_synthetic_pair(cfg: SyntheticConfig, rng: np.random.Generator) -> MatchPair:
    """
    Sample one synthetic training or test pair with degree one-hot features.

    Args:
        cfg: Synthetic family parameters
        rng: Random generator owned by the caller

    Returns:
        MatchPair whose target node order is shuffled when cfg.shuffle_target is set
    """
    source = generate_erdos_renyi(cfg.num_source_nodes, cfg.edge_prob, rng)
    if cfg.node_addition_frac > 0:
        pair = perturb_add_nodes(source, cfg.node_addition_frac, cfg.edge_prob, rng)
    else:
        target, identity = perturb_remove_edges(source, cfg.edge_removal_prob, rng)
        pair = MatchPair(source, target, identity)

    source = pair.source.with_node_features(degree_one_hot(pair.source, cfg.max_degree))
    target = pair.target.with_node_features(degree_one_hot(pair.target, cfg.max_degree))
    ground_truth = pair.ground_truth
    if cfg.shuffle_target:
        perm = rng.permutation(target.num_nodes)
        target = permute_graph(target, perm)
        ground_truth = perm[ground_truth]
    return MatchPair(source, target, ground_truth)


def build_synthetic_dataset(cfg: SyntheticConfig, num_pairs: int, rng: np.random.Generator) -> List[MatchPair]:
    """Sample num_pairs independent pairs from one synthetic family."""
    cfg.validate()
    dataset = [build_synthetic_pair(cfg, rng) for _ in range(num_pairs)]
    logger.info(
        f"Built {num_pairs} synthetic pairs (n={cfg.num_source_nodes}, p={cfg.edge_prob}, "
        f"p_s={cfg.edge_removal_prob}, q={cfg.node_addition_frac})"
    )
    return dataset


def graph_to_dict(g: Graph) -> Dict[str, Any]:
    return {
        "num_nodes": g.num_nodes,
        "directed": g.directed,
        "edges": g.edges.tolist(),
        "node_features": g.node_features.tolist() if g.node_features is not None else None,
        "edge_features": g.edge_features.tolist() if g.edge_features is not None else None,
        "edge_feature_dim": int(g.edge_features.shape[1]) if g.edge_features is not None else None,
    }


def graph_from_dict(payload: Dict[str, Any]) -> Graph:
    node_features = payload.get("node_features")
    edges = np.array(payload.get("edges", []), dtype=np.int64).reshape(-1, 2)
    edge_features = payload.get("edge_features")
    if edge_features is not None:
        edge_features = np.array(edge_features, dtype=np.float64)
        if payload.get("edge_feature_dim") is not None:
            edge_features = edge_features.reshape(len(edges), int(payload["edge_feature_dim"]))
    return Graph(
        int(payload["num_nodes"]),
        edges,
        bool(payload.get("directed", False)),
        np.array(node_features, dtype=np.float64) if node_features is not None else None,
        edge_features,
    )


def match_pair_to_dict(pair: MatchPair) -> Dict[str, Any]:
    return {
        "source": graph_to_dict(pair.source),
        "target": graph_to_dict(pair.target),
        "ground_truth": pair.ground_truth.tolist(),
    }


def match_pair_from_dict(payload: Dict[str, Any]) -> MatchPair:
    source = graph_from_dict(payload["source"])
    target = graph_from_dict(payload["target"])
    ground_truth = payload.get("ground_truth")
    if ground_truth is None:
        ground_truth = list(range(source.num_nodes))
    return MatchPair(source, target, np.array(ground_truth, dtype=np.int64))


def save_match_pair(pair: MatchPair, path: str) -> None:
    with open(path, "w") as handle:
        json.dump(match_pair_to_dict(pair), handle)


def load_match_pair(path: str) -> MatchPair:
    with open(path) as handle:
        return match_pair_from_dict(json.load(handle))
