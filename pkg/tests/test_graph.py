import numpy as np
import pytest
from hypothesis import given, strategies as st

from fimp.errors import ConfigError, FormatError
from fimp.graph import Graph, build_knn_graph, build_radius_graph, load_graph, sample_subgraph, save_graph
from fimp.numerics import Rng


def edge_set(g):
    return set(map(tuple, g.edges.tolist()))


def test_knn_collinear_points():
    g = build_knn_graph(np.array([[0.0], [1.0], [2.0]]), 1)
    assert edge_set(g) == {(0, 1), (1, 0), (2, 1)}


def test_knn_saturation_is_complete():
    g = build_knn_graph(Rng(0).uniform((6, 2)), 5)
    assert edge_set(g) == {(i, j) for i in range(6) for j in range(6) if i != j}


def test_knn_random_3d_matches_brute_force():
    coords = Rng(1).uniform((64, 3))
    g = build_knn_graph(coords, 5)
    d = ((coords[:, None] - coords[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    ref = {(i, int(j)) for i in range(64) for j in np.argsort(d[i], kind="stable")[:5]}
    assert edge_set(g) == ref
    assert np.all(g.out_degree() == 5)


def test_knn_symmetric_is_union_with_reverse():
    coords = Rng(2).uniform((30, 2))
    directed, sym = build_knn_graph(coords, 3), build_knn_graph(coords, 3, symmetric=True)
    e = edge_set(directed)
    assert edge_set(sym) == e | {(j, i) for i, j in e}


def test_knn_errors():
    with pytest.raises(ConfigError):
        build_knn_graph(np.zeros((3, 2)), 3)
    with pytest.raises(ConfigError):
        build_knn_graph(np.zeros((3, 2)), 0)


def test_radius_examples_and_oracle():
    two = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert edge_set(build_radius_graph(two, 10)) == {(0, 1), (1, 0)}
    assert build_radius_graph(two, 4).num_edges == 0
    coords = Rng(3).uniform((100, 2))
    g = build_radius_graph(coords, 0.15)
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    assert edge_set(g) == {(i, j) for i in range(100) for j in range(100) if i != j and d[i, j] <= 0.15}
    assert all((j, i) in edge_set(g) for i, j in edge_set(g))


@given(st.integers(0, 2**31), st.integers(1, 25), st.integers(0, 60))
def test_neighbor_index_is_bijection_with_edges(seed, n, m):
    rng = Rng(seed)
    pairs = {(int(a), int(b)) for a, b in rng.integers(0, n, (m, 2))}
    g = Graph(n, np.zeros((n, 2)), sorted(pairs))
    listed = {(int(s), i) for i in range(n) for s in g.in_neighbors(i)}
    assert listed == pairs and len(g.neighbors) == len(pairs)
    assert g.in_degree().sum() == len(pairs)


def test_graph_invariants_rejected():
    with pytest.raises(ConfigError):
        Graph(2, np.zeros((2, 2)), [(0, 2)])
    with pytest.raises(ConfigError):
        Graph(2, np.zeros((2, 2)), [(0, 1), (0, 1)])


def test_self_loops_and_permutation():
    g = Graph(3, np.arange(6.0).reshape(3, 2), [(0, 1), (1, 1)], node_labels=[0, 1, 2])
    loops = g.with_self_loops()
    assert edge_set(loops) == {(0, 1), (1, 1), (0, 0), (2, 2)}
    perm = np.array([2, 0, 1])
    p = g.permuted(perm)
    assert edge_set(p) == {(1, 2), (2, 2)}
    assert p.node_labels.tolist() == [2, 0, 1]


def test_subgraph_examples():
    star = Graph(5, np.zeros((5, 2)), [(0, i) for i in range(1, 5)] + [(i, 0) for i in range(1, 5)])
    sub, ids = sample_subgraph(star, [0], 1)
    assert ids.tolist() == [0, 1, 2, 3, 4] and sub.num_edges == 8
    sub, ids = sample_subgraph(star, [1, 2], 0)
    assert ids.tolist() == [1, 2] and sub.num_edges == 0
    with pytest.raises(ConfigError):
        sample_subgraph(star, [], 1)


@given(st.integers(0, 2**31), st.integers(0, 3))
def test_subgraph_matches_bfs_oracle(seed, hops):
    rng = Rng(seed)
    n = 20
    pairs = {(int(a), int(b)) for a, b in rng.integers(0, n, (25, 2)) if a != b}
    g = Graph(n, rng.uniform((n, 2)), sorted(pairs))
    seeds = [int(s) for s in rng.integers(0, n, 2)]
    reach, frontier = set(seeds), set(seeds)
    for _ in range(hops):
        frontier = {b for a, b in pairs if a in frontier} | {a for a, b in pairs if b in frontier}
        frontier -= reach
        reach |= frontier
    sub, ids = sample_subgraph(g, seeds, hops)
    assert set(ids.tolist()) == reach and len(set(ids.tolist())) == len(ids)
    assert {(int(ids[a]), int(ids[b])) for a, b in sub.edges} == {e for e in pairs if e[0] in reach and e[1] in reach}


@pytest.mark.parametrize("inline", [False, True])
def test_save_load_round_trip(tmp_path, inline):
    rng = Rng(4)
    g = Graph(4, rng.uniform((4, 3)), [(0, 1), (2, 3)], node_labels=[0, 1, 1, 0],
              node_features=rng.normal((4, 5, 2)), feature_ids=np.tile(np.arange(5), (4, 1)))
    path = save_graph(g, tmp_path / "g.json", inline_features=inline)
    back = load_graph(path)
    assert np.array_equal(back.coords, g.coords) and np.array_equal(back.edges, g.edges)
    assert np.array_equal(back.node_features, g.node_features)
    assert np.array_equal(back.node_labels, g.node_labels) and np.array_equal(back.feature_ids, g.feature_ids)


def test_load_rejects_bad_files(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_graph(tmp_path / "bad.json")
    g = Graph(2, np.zeros((2, 2)), node_features=np.ones((2, 3, 1)))
    path = save_graph(g, tmp_path / "g.json")
    blob = tmp_path / "g.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_graph(path)
