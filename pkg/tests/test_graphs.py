import networkx as nx
import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from exceptions import InvalidProbabilityError
from graphs import (
    Graph,
    MatchPair,
    SyntheticConfig,
    build_synthetic_dataset,
    build_synthetic_pair,
    degree_one_hot,
    generate_erdos_renyi,
    graph_from_dict,
    graph_to_dict,
    induced_subgraph,
    load_match_pair,
    match_pair_from_permutation,
    permute_graph,
    perturb_add_nodes,
    perturb_remove_edges,
    save_match_pair,
    t_hop_neighborhood,
)


def to_networkx(g):
    nxg = nx.Graph()
    nxg.add_nodes_from(range(g.num_nodes))
    nxg.add_edges_from(g.undirected_pairs().tolist())
    return nxg


def test_graph_rejects_invalid_edge_lists():
    with pytest.raises(ValueError):
        Graph(3, np.array([[0, 1]]))  # reverse direction missing
    with pytest.raises(ValueError):
        Graph.from_pairs(3, [(1, 1)])
    with pytest.raises(ValueError):
        Graph(3, np.array([[0, 1], [0, 1]]), directed=True)
    with pytest.raises(ValueError):
        Graph.from_pairs(3, [(0, 3)])


def test_undirected_graph_is_closed_under_reversal(rng):
    g = generate_erdos_renyi(15, 0.3, rng)
    dense = g.dense_adjacency()
    npt.assert_array_equal(dense, dense.T)
    assert np.all(np.diag(dense) == 0)


def test_erdos_renyi_extremes(rng):
    g = generate_erdos_renyi(2, 1.0, rng)
    npt.assert_array_equal(g.undirected_pairs(), [[0, 1]])
    assert generate_erdos_renyi(5, 1e-9, rng).num_edges == 0
    for p in (0.0, 1.5, -0.1):
        with pytest.raises(InvalidProbabilityError):
            generate_erdos_renyi(5, p, rng)


def test_erdos_renyi_edge_count_statistics():
    counts = [generate_erdos_renyi(50, 0.2, np.random.default_rng(seed)).num_edges // 2 for seed in range(200)]
    sigma = np.sqrt(1225 * 0.2 * 0.8)
    assert abs(np.mean(counts) - 245) < 3 * sigma


def test_generators_are_reproducible():
    a = generate_erdos_renyi(30, 0.2, np.random.default_rng(7))
    b = generate_erdos_renyi(30, 0.2, np.random.default_rng(7))
    npt.assert_array_equal(a.edges, b.edges)
    pa, _ = perturb_remove_edges(a, 0.3, np.random.default_rng(8))
    pb, _ = perturb_remove_edges(b, 0.3, np.random.default_rng(8))
    npt.assert_array_equal(pa.edges, pb.edges)


def test_remove_edges_without_noise_is_identity(rng):
    g = generate_erdos_renyi(20, 0.3, rng)
    perturbed, gt = perturb_remove_edges(g, 0.0, rng)
    npt.assert_array_equal(perturbed.edges, g.edges)
    npt.assert_array_equal(gt, np.arange(20))


def test_remove_edges_keeps_star_leaves_attached(rng):
    star = Graph.from_pairs(4, [(0, 1), (0, 2), (0, 3)])
    perturbed, _ = perturb_remove_edges(star, 0.999, rng)
    assert perturbed.degrees().min() >= 1
    assert perturbed.num_edges == star.num_edges


def test_remove_edges_never_isolates_nodes():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(1000):
        g = generate_erdos_renyi(20, 0.3, rng)
        if g.degrees().min() < 1:
            continue
        perturbed, _ = perturb_remove_edges(g, float(rng.uniform(0.0, 0.99)), rng)
        assert perturbed.degrees().min() >= 1
        checked += 1
    assert checked > 500


def rejection_sampled_survival(g, p_s, num_samples, rng):
    """Surviving edge fractions of i.i.d. removals, keeping only draws that isolate no node."""
    pairs = g.undirected_pairs()
    had_edges = g.degrees() > 0
    fractions = []
    while len(fractions) < num_samples:
        kept = pairs[rng.random(len(pairs)) >= p_s]
        degree = np.bincount(kept.ravel(), minlength=g.num_nodes)
        if np.all(degree[had_edges] > 0):
            fractions.append(len(kept) / len(pairs))
    return np.array(fractions)


@pytest.mark.parametrize("p_s", [0.2, 0.5])
def test_remove_edges_survival_fraction(p_s):
    rng = np.random.default_rng(3)
    g = generate_erdos_renyi(50, 0.2, rng)
    expected = rejection_sampled_survival(g, p_s, 2000, np.random.default_rng(11))
    observed = np.array([perturb_remove_edges(g, p_s, rng)[0].num_edges / g.num_edges for _ in range(300)])

    sigma = np.sqrt(expected.var() / len(expected) + observed.var() / len(observed))
    assert abs(observed.mean() - expected.mean()) < 3 * sigma


def test_add_nodes_sizes_and_ground_truth(rng):
    g = generate_erdos_renyi(50, 0.2, rng)
    same = perturb_add_nodes(g, 0.0, 0.2, rng)
    npt.assert_array_equal(same.target.edges, g.edges)
    pair = perturb_add_nodes(g, 0.5, 0.2, rng)
    assert pair.target.num_nodes == 75
    npt.assert_array_equal(pair.ground_truth, np.arange(50))
    # original edges are preserved among the first 50 target nodes
    sub, _ = induced_subgraph(pair.target, set(range(50)))
    npt.assert_array_equal(sub.edges, g.edges)


def test_add_nodes_new_edge_count():
    rng = np.random.default_rng(11)
    new_pairs = sum(range(100, 120))
    expected = new_pairs * 0.1
    sigma = np.sqrt(new_pairs * 0.1 * 0.9)
    counts = []
    for _ in range(20):
        g = generate_erdos_renyi(100, 0.1, rng)
        pair = perturb_add_nodes(g, 0.2, 0.1, rng)
        assert pair.target.num_nodes == 120
        counts.append((pair.target.num_edges - g.num_edges) // 2)
    assert abs(np.mean(counts) - expected) < 3 * sigma


def test_degree_one_hot(triangle):
    isolated = Graph.from_pairs(2, [])
    npt.assert_array_equal(degree_one_hot(isolated, 3)[:, 0], [1, 1])
    features = degree_one_hot(triangle, 4)
    npt.assert_array_equal(features, np.tile([0, 0, 1, 0, 0], (3, 1)))
    star = Graph.from_pairs(10, [(0, j) for j in range(1, 10)])
    assert degree_one_hot(star, 5)[0, 5] == 1
    npt.assert_array_equal(degree_one_hot(star, 5).sum(axis=1), np.ones(10))


def test_t_hop_neighborhood_small_cases(path3):
    assert t_hop_neighborhood(path3, 1, 0) == {1}
    assert t_hop_neighborhood(path3, 0, 1) == {0, 1}
    assert t_hop_neighborhood(path3, 0, 2) == {0, 1, 2}


def test_t_hop_neighborhood_matches_networkx(rng):
    g = generate_erdos_renyi(20, 0.15, rng)
    nxg = to_networkx(g)
    for i in range(g.num_nodes):
        for T in (1, 2, 20):
            expected = set(nx.single_source_shortest_path_length(nxg, i, cutoff=T))
            assert t_hop_neighborhood(g, i, T) == expected


def test_t_hop_neighborhood_ignores_direction():
    g = Graph(3, np.array([[0, 1], [2, 1]]), directed=True)
    assert t_hop_neighborhood(g, 0, 2) == {0, 1, 2}


def test_induced_subgraph(triangle, rng):
    same, index = induced_subgraph(triangle, {0, 1, 2})
    npt.assert_array_equal(same.edges, triangle.edges)
    assert index == {0: 0, 1: 1, 2: 2}
    edge, _ = induced_subgraph(triangle, {0, 1})
    npt.assert_array_equal(edge.undirected_pairs(), [[0, 1]])

    g = generate_erdos_renyi(25, 0.3, rng)
    subset = set(rng.choice(25, size=12, replace=False).tolist())
    sub, index = induced_subgraph(g, subset)
    expected = sorted((index[i], index[j]) for i, j in g.edges.tolist() if i in subset and j in subset)
    assert sorted(map(tuple, sub.edges.tolist())) == expected


def test_match_pair_invariants(triangle, path3):
    big = Graph.from_pairs(4, [(0, 1)])
    with pytest.raises(ValueError):
        MatchPair(big, triangle, np.arange(4))
    with pytest.raises(ValueError):
        MatchPair(triangle, path3, np.array([0, 0, 1]))
    with pytest.raises(ValueError):
        MatchPair(triangle, path3, np.array([0, 1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10_000))
def test_permute_graph_relabels_adjacency(n, seed):
    rng = np.random.default_rng(seed)
    g = generate_erdos_renyi(n, 0.4, rng).with_node_features(rng.standard_normal((n, 2)))
    perm = rng.permutation(n)
    permuted = permute_graph(g, perm)
    npt.assert_array_equal(permuted.dense_adjacency()[np.ix_(perm, perm)], g.dense_adjacency())
    npt.assert_array_equal(permuted.node_features[perm], g.node_features)


def test_synthetic_pair_ground_truth_is_an_isomorphism():
    cfg = SyntheticConfig(num_source_nodes=15, edge_prob=0.3)
    pair = build_synthetic_pair(cfg, np.random.default_rng(5))
    a_s = pair.source.dense_adjacency()
    a_t = pair.target.dense_adjacency()
    gt = pair.ground_truth
    npt.assert_array_equal(a_t[np.ix_(gt, gt)], a_s)
    npt.assert_array_equal(pair.target.node_features[gt], pair.source.node_features)
    assert not np.array_equal(gt, np.arange(15))


def test_synthetic_config_rejects_two_noise_kinds():
    with pytest.raises(ValueError):
        SyntheticConfig(edge_removal_prob=0.1, node_addition_frac=0.1).validate()
    with pytest.raises(InvalidProbabilityError):
        SyntheticConfig(edge_removal_prob=1.0).validate()


def test_synthetic_dataset_with_added_nodes():
    cfg = SyntheticConfig(num_source_nodes=20, edge_prob=0.2, node_addition_frac=0.25, max_degree=8)
    dataset = build_synthetic_dataset(cfg, 3, np.random.default_rng(0))
    for pair in dataset:
        assert pair.source.num_nodes == 20
        assert pair.target.num_nodes == 25
        assert pair.target.node_features.shape == (25, 9)


def test_match_pair_file_round_trip(tmp_path, rng):
    g = generate_erdos_renyi(6, 0.5, rng)
    pair = match_pair_from_permutation(g, rng.permutation(6))
    path = tmp_path / "pair.json"
    save_match_pair(pair, str(path))
    loaded = load_match_pair(str(path))
    npt.assert_array_equal(loaded.target.edges, pair.target.edges)
    npt.assert_array_equal(loaded.ground_truth, pair.ground_truth)


def test_edgeless_graph_accepts_empty_edge_features():
    g = graph_from_dict({"num_nodes": 3, "directed": False, "edges": [], "node_features": None,
                         "edge_features": []})
    assert g.num_edges == 0
    assert g.edge_features.shape == (0, 0)


def test_edgeless_graph_with_edge_features_round_trips(tmp_path):
    g = Graph(3, np.zeros((0, 2)), edge_features=np.zeros((0, 4)))
    assert graph_from_dict(graph_to_dict(g)).edge_features.shape == (0, 4)

    path = tmp_path / "edgeless.json"
    save_match_pair(MatchPair(g, g, np.arange(3)), str(path))
    loaded = load_match_pair(str(path))
    assert loaded.source.edge_features.shape == (0, 4)
    assert loaded.target.edge_features.shape == (0, 4)


def test_edge_features_round_trip_with_edges(rng):
    pairs = [(0, 1), (1, 2), (2, 3)]
    g = Graph.from_pairs(4, pairs, edge_features=rng.normal(size=(3, 2)))
    loaded = graph_from_dict(graph_to_dict(g))
    npt.assert_array_equal(loaded.edges, g.edges)
    npt.assert_array_equal(loaded.edge_features, g.edge_features)


def test_edge_features_need_one_row_per_edge():
    with pytest.raises(ValueError, match="one row per edge"):
        Graph.from_pairs(3, [(0, 1), (1, 2)], edge_features=np.ones((3, 2)))
    with pytest.raises(ValueError, match="one row per edge"):
        Graph(3, np.zeros((0, 2)), edge_features=np.ones((1, 2)))


def test_from_pairs_gives_both_directions_the_same_features():
    g = Graph.from_pairs(3, [(1, 2), (0, 1)], edge_features=[[2.0], [1.0]])
    npt.assert_array_equal(g.edges, [[0, 1], [1, 0], [1, 2], [2, 1]])
    npt.assert_array_equal(g.edge_features[:, 0], [1.0, 1.0, 2.0, 2.0])
    npt.assert_array_equal(g.undirected_edge_features()[:, 0], [1.0, 2.0])


def labelled_edge_graph(rng):
    g = generate_erdos_renyi(20, 0.3, rng)
    pairs = g.undirected_pairs()
    labelled = Graph.from_pairs(g.num_nodes, pairs.tolist(),
                                edge_features=np.arange(1, len(pairs) + 1, dtype=np.float64))
    labels = {tuple(e): float(f) for e, f in zip(pairs.tolist(), labelled.undirected_edge_features()[:, 0])}
    return labelled, labels


def test_remove_edges_keeps_edge_features(rng):
    g, labels = labelled_edge_graph(rng)
    perturbed, _ = perturb_remove_edges(g, 0.5, rng)
    assert perturbed.edge_features.shape == (perturbed.num_edges, 1)
    for (i, j), feature in zip(perturbed.edges.tolist(), perturbed.edge_features[:, 0]):
        assert feature == labels[(min(i, j), max(i, j))]


def test_add_nodes_keeps_edge_features_and_zeroes_new_ones(rng):
    g, labels = labelled_edge_graph(rng)
    pair = perturb_add_nodes(g, 0.5, 0.3, rng)
    target = pair.target
    assert target.edge_features.shape == (target.num_edges, 1)
    for (i, j), feature in zip(target.edges.tolist(), target.edge_features[:, 0]):
        assert feature == labels.get((min(i, j), max(i, j)), 0.0)
    assert (target.edge_features[:, 0] == 0.0).sum() == target.num_edges - g.num_edges
