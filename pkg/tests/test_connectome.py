import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fodf_kit import connectome as cn
from fodf_kit.errors import (AsymmetricMatrix, DataError, DisconnectedGraph, IoFailure,
                             NegativeWeight, ParseError, ZeroWeightGraph)
from helpers import brute_force_modularity, brute_force_paths, random_connected_graph


def G(w):
    return cn.Connectome(np.asarray(w, float))


def test_path_graph_by_hand():
    # 0 -1- 1 -2- 2 : lengths 1 and 0.5
    g = G([[0, 1, 0], [1, 0, 2], [0, 2, 0]])
    d = cn.shortest_path_lengths(g)
    np.testing.assert_allclose(d, [[0, 1, 1.5], [1, 0, 0.5], [1.5, 0.5, 0]])
    assert cn.characteristic_path_length(g) == pytest.approx(3.0 / 3)
    assert cn.global_efficiency(g) == pytest.approx((1 + 2 + 1 / 1.5) / 3)
    np.testing.assert_allclose(cn.betweenness_centrality(g), [0, 1, 0])


def test_square_splits_betweenness():
    # unit 4-cycle: each opposite pair has two shortest paths
    w = np.zeros((4, 4))
    for i in range(4):
        w[i, (i + 1) % 4] = w[(i + 1) % 4, i] = 1
    bc = cn.betweenness_centrality(G(w), normalized=False)
    np.testing.assert_allclose(bc, 0.5)


def test_star_betweenness():
    w = np.zeros((5, 5))
    w[0, 1:] = w[1:, 0] = 1
    np.testing.assert_allclose(cn.betweenness_centrality(G(w)), [1, 0, 0, 0, 0])
    assert cn.avg_betweenness_centrality(G(w)) == pytest.approx(0.2)


def test_two_cliques_modularity():
    w = np.zeros((6, 6))
    w[:3, :3] = 1
    w[3:, 3:] = 1
    np.fill_diagonal(w, 0)
    w[2, 3] = w[3, 2] = 1
    q, labels = cn.modularity(G(w))
    assert labels.tolist() == [0, 0, 0, 1, 1, 1]
    # 7 edges, each triangle has degree sum 7: Q = 2 * (3/7 - 1/4)
    assert q == pytest.approx(2 * (3 / 7 - 0.25))
    assert cn.partition_modularity(G(w), labels) == pytest.approx(q)
    assert cn.partition_modularity(G(w), [0] * 6) == pytest.approx(0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_matches_exhaustive_oracles(seed):
    w = random_connected_graph(seed, 3, 7)
    g = G(w)
    dist, bc = brute_force_paths(w)
    np.testing.assert_allclose(cn.shortest_path_lengths(g), dist, rtol=1e-9)
    np.testing.assert_allclose(cn.betweenness_centrality(g), bc, atol=1e-9)
    assert cn.modularity(g)[0] == pytest.approx(brute_force_modularity(w), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 10.0))
def test_invariances(seed, scale):
    w = random_connected_graph(seed, 3, 8)
    g = G(w)
    perm = np.random.default_rng(seed).permutation(len(w))
    base = cn.connectome_metrics(g)
    permuted = cn.connectome_metrics(G(w[np.ix_(perm, perm)]))
    scaled = cn.connectome_metrics(G(w * scale))
    for k in base:
        assert permuted[k] == pytest.approx(base[k], rel=1e-9, abs=1e-12)
    assert scaled["modularity"] == pytest.approx(base["modularity"], abs=1e-9)
    assert scaled["avg_betweenness"] == pytest.approx(base["avg_betweenness"], abs=1e-9)
    assert scaled["char_path_length"] == pytest.approx(base["char_path_length"] / scale, rel=1e-9)
    assert scaled["global_efficiency"] == pytest.approx(base["global_efficiency"] * scale, rel=1e-9)


def test_louvain_on_large_planted_graph():
    r = np.random.default_rng(0)
    n, k = 40, 4
    lab = np.repeat(np.arange(k), n // k)
    p = np.where(lab[:, None] == lab[None, :], 0.8, 0.02)
    w = np.triu((r.random((n, n)) < p) * r.uniform(0.5, 1.5, (n, n)), 1)
    g = G(w + w.T)
    q, found = cn.modularity(g, seed=3)
    assert q >= cn.partition_modularity(g, lab) - 1e-12
    assert q == pytest.approx(cn.partition_modularity(g, found))
    assert cn.modularity(g, seed=3)[0] == q


def test_disconnected_graph():
    w = np.zeros((4, 4))
    w[0, 1] = w[1, 0] = w[2, 3] = w[3, 2] = 1
    with pytest.raises(DisconnectedGraph):
        cn.characteristic_path_length(G(w))
    assert cn.global_efficiency(G(w)) == pytest.approx(4 / 12)


def test_validation_errors():
    with pytest.raises(NegativeWeight):
        G([[0, -1], [-1, 0]])
    with pytest.raises(AsymmetricMatrix):
        G([[0, 1], [2, 0]])
    with pytest.raises(DataError):
        G([[1, 1], [1, 0]])
    with pytest.raises(ZeroWeightGraph):
        cn.modularity(G(np.zeros((3, 3))))
    with pytest.raises(DataError):
        cn.avg_betweenness_centrality(G([[0, 1], [1, 0]]))


def test_round_trip(tmp_path):
    w = random_connected_graph(5, 8, 8)
    big = np.zeros((84, 84))
    big[:8, :8] = w
    big[8:, 8:] = np.eye(76, k=1) + np.eye(76, k=-1)
    for name in ("c.csv", "c.json"):
        g = cn.Connectome(big, [f"r{i}" for i in range(84)] if name.endswith("json") else None)
        cn.save_connectome(g, tmp_path / name)
        back = cn.load_connectome(tmp_path / name)
        assert np.array_equal(back.w, g.w)
        assert back.labels == g.labels


def test_load_tolerates_tiny_asymmetry(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("# header\n0 1.0000001\n1 0\n")
    g = cn.load_connectome(p)
    assert g.w[0, 1] == g.w[1, 0]
    p.write_text("0,2\n1,0\n")
    with pytest.raises(AsymmetricMatrix):
        cn.load_connectome(p)
    p.write_text("0,x\n1,0\n")
    with pytest.raises(ParseError):
        cn.load_connectome(p)
    with pytest.raises(IoFailure):
        cn.load_connectome(tmp_path / "missing.csv")
