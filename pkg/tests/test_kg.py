import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgfollowup.kg import (
    INDEX_MAGIC,
    IngestionError,
    KnowledgeGraph,
    load_graph,
    normalize_name,
    read_graph_file,
)

from conftest import TOY, make_graph

HEADER = "relation,display_relation,x_id,x_type,x_name,y_id,y_type,y_name\n"


def _rows(*pairs):
    return HEADER + "".join(f"assoc,associated,{a},disease,{a} name,{b},disease,{b} name\n" for a, b in pairs)


def test_duplicate_rows_collapse():
    g = load_graph(_rows(("a", "b"), ("b", "c"), ("a", "b")))
    assert g.node_count == 3
    assert g.edge_count == 2
    assert g.stats.duplicates == 1


def test_reversed_duplicate_is_the_same_undirected_edge():
    g = load_graph(_rows(("a", "b"), ("b", "a")))
    assert g.edge_count == 1


def test_self_loop_dropped_and_counted():
    g = load_graph(_rows(("a", "b"), ("c", "c")))
    assert g.edge_count == 1
    assert g.stats.self_loops == 1


def test_random_adjacency_symmetric_full_scan():
    rng = random.Random(7)
    ids = [f"n{i}" for i in range(10)]
    pairs = [(rng.choice(ids), rng.choice(ids)) for _ in range(25)]
    g = load_graph(_rows(*pairs))
    for u in g.nodes:
        for v in g.nodes:
            fwd = {r for n, r in g.neighbors(u) if n == v}
            back = {r for n, r in g.neighbors(v) if n == u}
            assert fwd == back
    # every non-loop input pair is present
    for a, b in pairs:
        if a != b:
            assert b in g.neighbor_ids(a)


def test_get_node_exact_ids():
    g = load_graph(_rows(("Abc", "d")))
    assert g.get_node("Abc").name == "Abc name"
    assert g.get_node("zzz") is None
    assert g.get_node("abc") is None
    assert "Abc" in g and "abc" not in g


def test_neighbors_path_isolated_and_star():
    g = make_graph([("a", "b"), ("b", "c")], nodes=["iso"])
    assert g.neighbors("b") == {("a", "r"), ("c", "r")}
    assert g.neighbors("iso") == frozenset()
    with pytest.raises(KeyError):
        g.neighbors("nope")
    star = make_graph([("hub", f"leaf{i}") for i in range(5)])
    scan = {(e.target if e.source == "hub" else e.source, e.relation)
            for e in star.edges if "hub" in (e.source, e.target)}
    assert star.neighbors("hub") == scan
    assert len(scan) == 5


@pytest.mark.parametrize("raw,expected", [
    ("Head-Ache ", "head ache"),
    ("nausea", "nausea"),
    ("  COUGH!!", "cough"),
    ("Shortness  of\tbreath", "shortness of breath"),
])
def test_normalize_name(raw, expected):
    assert normalize_name(raw) == expected


def test_primekg_index_columns_preferred():
    text = ("relation,display_relation,x_index,x_id,x_type,x_name,y_index,y_id,y_type,y_name\n"
            "r,r,0,MONDO:1,disease,flu,1,HP:1,effect/phenotype,fever\n")
    g = load_graph(text)
    assert set(g.nodes) == {"0", "1"}
    assert g.get_node("0").name == "flu"


def test_compact_format_and_tab_sniffing():
    text = ("source_id\tsource_name\tsource_type\ttarget_id\ttarget_name\ttarget_type\trelation\n"
            "a\talpha\tdisease\tb\tbeta\tdrug\ttreats\n")
    g = load_graph(text, format="compact")
    assert g.edge_count == 1
    assert g.relation_between("b", "a") == "treats"
    assert g.get_node("b").category == "drug"


def test_malformed_row_reports_line_number():
    text = HEADER + "r,r,a,disease,A,b,disease,B\nr,r,a,disease\n"
    with pytest.raises(IngestionError) as exc:
        load_graph(text)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


@pytest.mark.parametrize("text", ["", "   \n", HEADER])
def test_empty_inputs_rejected(text):
    with pytest.raises(IngestionError):
        load_graph(text)


def test_missing_columns_rejected():
    with pytest.raises(IngestionError, match="missing columns"):
        load_graph("a,b\n1,2\n")


def test_stream_and_bytes_inputs_agree():
    text = _rows(("a", "b"), ("b", "c"))
    g1 = load_graph(io.BytesIO(text.encode()))
    g2 = load_graph(io.StringIO(text))
    g3 = load_graph(text.encode())
    assert g1.to_index_bytes() == g2.to_index_bytes() == g3.to_index_bytes()


def test_index_roundtrip_and_determinism(tmp_path, toy_graph):
    data = toy_graph.to_index_bytes()
    assert data.startswith(INDEX_MAGIC)
    again = read_graph_file(str(TOY / "kg.csv")).to_index_bytes()
    assert again == data
    path = tmp_path / "toy.kgi"
    path.write_bytes(data)
    g = read_graph_file(str(path))
    assert g.edges == toy_graph.edges
    assert {n: (v.name, v.category) for n, v in g.nodes.items()} == \
        {n: (v.name, v.category) for n, v in toy_graph.nodes.items()}


def test_bad_index_magic():
    with pytest.raises(IngestionError, match="magic"):
        KnowledgeGraph.from_index_bytes(b"nope")


def test_name_lookup_and_relation(toy_graph):
    assert toy_graph.lookup_name("Nausea!") == ("P1",)
    assert toy_graph.name_of("D2") == "gastroenteritis"
    assert toy_graph.relation_between("D2", "P1") == "disease_phenotype_positive"
    assert toy_graph.relation_between("D2", "P9") is None


def test_lexicographically_smallest_relation_between():
    g = make_graph([("a", "b", "zeta"), ("b", "a", "alpha")])
    assert g.edge_count == 2
    assert g.relation_between("a", "b") == "alpha"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=30))
def test_index_roundtrip_property(pairs):
    edges = [(f"v{a}", f"v{b}") for a, b in pairs]
    loops = sum(a == b for a, b in pairs)
    if loops == len(pairs):
        return
    g = make_graph(edges)
    back = KnowledgeGraph.from_index_bytes(g.to_index_bytes())
    assert back.edges == g.edges
    assert back.edge_count == len({(min(a, b), max(a, b)) for a, b in edges if a != b})
    assert g.stats.self_loops == loops
