import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfollowup.search import Subgraph, bfs_subgraph, enumerate_shortest_paths, intersect_subgraphs

from conftest import make_graph
from oracles import INF, floyd_warshall, minimal_paths, random_graph


def test_bfs_path_graph():
    g = make_graph([("a", "b"), ("b", "c"), ("c", "d")])
    assert bfs_subgraph(g, "a", 2).members == {"a": 0, "b": 1, "c": 2}
    assert bfs_subgraph(g, "a", 0).members == {"a": 0}


def test_bfs_errors():
    g = make_graph([("a", "b")])
    with pytest.raises(KeyError):
        bfs_subgraph(g, "zz", 1)
    with pytest.raises(ValueError):
        bfs_subgraph(g, "a", -1)


def test_bfs_matches_floyd_warshall_15_nodes():
    rng = random.Random(11)
    nodes, edges = random_graph(rng, 15, 0.18)
    g = make_graph(edges, nodes=nodes)
    dist = floyd_warshall(nodes, edges)
    for seed in nodes:
        expected = {v: int(dist[seed, v]) for v in nodes if dist[seed, v] <= 3}
        assert bfs_subgraph(g, seed, 3).members == expected


def test_intersection_examples():
    a = Subgraph("a", 1, {"a": 0, "b": 1, "c": 1})
    d = Subgraph("d", 1, {"b": 1, "c": 1, "d": 0})
    assert intersect_subgraphs([a, d]) == {"b", "c"}
    x = Subgraph("x", 1, {"x": 0, "y": 1})
    assert intersect_subgraphs([a, x]) == set()
    assert intersect_subgraphs([a]) == {"b", "c"}
    with pytest.raises(ValueError):
        intersect_subgraphs([])


def test_intersection_excludes_seed_reachable_from_other_seed():
    g = make_graph([("a", "b"), ("b", "c")])
    sa, sb = bfs_subgraph(g, "a", 2), bfs_subgraph(g, "b", 2)
    # b is within a's subgraph and a within b's; both are seeds so both are excluded
    assert intersect_subgraphs([sa, sb]) == {"c"}


def test_intersection_fold_any_order():
    rng = random.Random(3)
    nodes, edges = random_graph(rng, 14, 0.2)
    g = make_graph(edges, nodes=nodes)
    subs = [bfs_subgraph(g, s, 2) for s in rng.sample(nodes, 3)]
    seeds = {s.seed for s in subs}
    for perm in itertools.permutations(subs):
        fold = set(perm[0].members)
        for s in perm[1:]:
            fold &= set(s.members)
        assert intersect_subgraphs(list(perm)) == fold - seeds


def test_square_two_paths_lexicographic():
    g = make_graph([("a", "b"), ("b", "d"), ("a", "c"), ("c", "d")])
    paths = enumerate_shortest_paths(g, "a", "d", 30)
    assert [p.nodes for p in paths] == [("a", "b", "d"), ("a", "c", "d")]
    assert paths[0].interior == ("b",)
    assert paths[0].relations == ("r", "r")
    assert paths[0].descriptor() == "a > b > d"
    assert enumerate_shortest_paths(g, "a", "d", 1)[0].nodes == ("a", "b", "d")


def test_unreachable_and_errors():
    g = make_graph([("a", "b")], nodes=["z"])
    assert enumerate_shortest_paths(g, "a", "z", 5) == []
    with pytest.raises(KeyError):
        enumerate_shortest_paths(g, "a", "missing", 5)
    with pytest.raises(ValueError):
        enumerate_shortest_paths(g, "a", "a", 5)
    with pytest.raises(ValueError):
        enumerate_shortest_paths(g, "a", "b", 0)


def test_paths_match_exhaustive_dfs_connected_12():
    rng = random.Random(5)
    nodes = [f"n{i:02d}" for i in range(12)]
    # spanning chain guarantees connectivity
    edges = [(nodes[i], nodes[i + 1]) for i in range(11)]
    edges += [(a, b) for a, b in itertools.combinations(nodes, 2) if rng.random() < 0.2]
    g = make_graph(edges, nodes=nodes)
    for s, t in itertools.permutations(nodes[:6], 2):
        got = [p.nodes for p in enumerate_shortest_paths(g, s, t, 10_000)]
        assert got == minimal_paths(nodes, edges, s, t, 10_000)


def test_sampled_paths_are_shortest_and_seeded():
    mids = [f"m{i:02d}" for i in range(20)]
    g = make_graph([("s", m) for m in mids] + [(m, "t") for m in mids])
    a = enumerate_shortest_paths(g, "s", "t", 5, sample_seed=1)
    b = enumerate_shortest_paths(g, "s", "t", 5, sample_seed=1)
    assert [p.nodes for p in a] == [p.nodes for p in b]
    assert len(a) == 5 and all(len(p.nodes) == 3 for p in a)
    assert [p.nodes for p in a] == sorted(p.nodes for p in a)


def test_render_uses_names(toy_graph):
    p = enumerate_shortest_paths(toy_graph, "P1", "D2", 5)[0]
    assert p.render(toy_graph) == "nausea —[disease_phenotype_positive]→ gastroenteritis"


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9), st.floats(0.1, 0.6))
def test_bfs_property_against_oracle(seed, n, p):
    rng = random.Random(seed)
    nodes, edges = random_graph(rng, n, p)
    g = make_graph(edges, nodes=nodes)
    dist = floyd_warshall(nodes, edges)
    src = nodes[0]
    for depth in (0, 1, 2):
        assert bfs_subgraph(g, src, depth).members == {v: dist[src, v] for v in nodes if dist[src, v] <= depth}
    tgt = nodes[-1]
    got = [x.nodes for x in enumerate_shortest_paths(g, src, tgt, 7)]
    if dist[src, tgt] == INF:
        assert got == []
    else:
        assert got == minimal_paths(nodes, edges, src, tgt, 7)
