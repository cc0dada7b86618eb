import numpy as np
import pytest

from gnn import GnnConfig
from graphs import Graph, generate_erdos_renyi, match_pair_from_permutation
from matching.consensus_refiner import ConsensusConfig
from matching.model import ModelConfig, ModelParams

# Six nodes is the smallest order with an automorphism-free graph.
ASYMMETRIC_EDGES = [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (2, 5)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def triangle():
    return Graph.from_pairs(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def path3():
    return Graph.from_pairs(3, [(0, 1), (1, 2)])


@pytest.fixture
def asymmetric_graph():
    return Graph.from_pairs(6, ASYMMETRIC_EDGES)


@pytest.fixture
def make_isomorphic_pair():
    """Factory: ER graph with random features and a randomly permuted copy."""

    def make(n, p, rng, feature_dim=3, ensure_edges=True):
        g = generate_erdos_renyi(n, p, rng)
        while ensure_edges and g.num_edges == 0:
            g = generate_erdos_renyi(n, p, rng)
        g = g.with_node_features(rng.standard_normal((n, feature_dim)))
        return match_pair_from_permutation(g, rng.permutation(n))

    return make


@pytest.fixture
def make_model():
    """Factory: small model for a given feature width and consensus indicator width."""

    def make(in_dim=3, indicator_dim=4, kind="gin", hidden=8, num_layers=2, batch_norm=True, seed=0,
             consensus_kind=None):
        matching = GnnConfig(kind=kind, num_layers=num_layers, hidden_dim=hidden, batch_norm=batch_norm)
        consensus = GnnConfig(kind=consensus_kind or kind, num_layers=num_layers, hidden_dim=hidden,
                              batch_norm=batch_norm)
        config = ModelConfig(in_dim=in_dim, matching=matching, consensus=consensus, indicator_dim=indicator_dim)
        return ModelParams(config, np.random.default_rng(seed))

    return make


@pytest.fixture
def small_consensus():
    return ConsensusConfig(num_iters_train=2, num_iters_test=4, indicator="random", random_dim=4,
                           normalization="sinkhorn", sinkhorn_max_iters=50)
