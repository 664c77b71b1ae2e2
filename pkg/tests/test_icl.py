import pytest

from kgfollowup.data import BenchmarkInstance, Conversation
from kgfollowup.evaluation import read_benchmark_file
from kgfollowup.icl import (
    EmptyPoolError,
    ICLExample,
    ICLPool,
    build_pool,
    detect_hard,
    load_pool,
    save_pool,
    select_examples,
)

from conftest import FIXTURES, scripted_gateway

HARD10 = FIXTURES / "hard10"


def _inst(i: int) -> BenchmarkInstance:
    conv = Conversation((("patient", f"message {i}"),), f"i{i:03d}")
    return BenchmarkInstance(conv.instance_id, conv, ((f"Question {i}?", 1.0),))


def test_detect_hard_rules(toy_graph):
    conv = Conversation((("patient", "hello"),), "a")
    assert detect_hard(conv, toy_graph, scripted_gateway([{"role": "extract", "response": "NONE"}]))
    assert not detect_hard(conv, toy_graph, scripted_gateway([{"role": "extract", "response": "1. nausea"}]))
    # unparseable extraction counts as hard
    assert detect_hard(conv, toy_graph, scripted_gateway([{"role": "extract", "response": ""}]))


def test_kg_hard_pool_on_ten_case_fixture(toy_graph):
    dev = read_benchmark_file(str(HARD10 / "dev.jsonl"))
    gw = scripted_gateway(directory=HARD10 / "script")
    pool = build_pool(dev, toy_graph, gw, strategy="kg-hard")
    assert pool.ids() == ["h08", "h09", "h10"]
    assert all(e.hardness == "kg-hard" for e in pool.examples)


def test_random_pool_is_full_dev_set():
    dev = [_inst(i) for i in range(250)]
    pool = build_pool(dev, None, None, strategy="random")
    assert len(pool) == 250


def test_supervised_hard():
    dev = [_inst(i) for i in range(4)]
    with pytest.raises(ValueError, match="report"):
        build_pool(dev, None, None, strategy="supervised-hard")
    with pytest.raises(EmptyPoolError):
        build_pool(dev, None, None, strategy="supervised-hard", recalls={d.instance_id: 0.5 for d in dev})
    pool = build_pool(dev, None, None, strategy="supervised-hard", recalls={"i000": 0.0, "i001": 0.2})
    assert pool.ids() == ["i000"] and pool.examples[0].source_recall == 0.0


def test_empty_kg_hard_pool_errors(toy_graph):
    dev = [_inst(0)]
    gw = scripted_gateway([{"role": "extract", "response": "1. nausea"}])
    with pytest.raises(EmptyPoolError, match="random"):
        build_pool(dev, toy_graph, gw, strategy="kg-hard")


def test_select_examples_seeded():
    pool = ICLPool(tuple(ICLExample.from_instance(_inst(i)) for i in range(50)), "random")
    assert select_examples(pool, 0) == []
    a = [e.instance_id for e in select_examples(pool, 4, seed=1)]
    b = [e.instance_id for e in select_examples(pool, 4, seed=1)]
    c = [e.instance_id for e in select_examples(pool, 4, seed=2)]
    assert a == b and a != c and len(set(a)) == 4
    small = select_examples(list(pool.examples[:2]), 4)
    assert len(small) == 2
    assert "i000" not in [e.instance_id for e in select_examples(pool, 50, exclude=["i000"])]
    with pytest.raises(ValueError):
        select_examples(pool, -1)


def test_pool_persistence_roundtrip(tmp_path):
    dev = [_inst(i) for i in range(3)]
    pool = ICLPool(tuple(ICLExample.from_instance(d, "kg-hard") for d in dev[:2]), "kg-hard", 3)
    path = tmp_path / "pool.json"
    save_pool(pool, str(path))
    back = load_pool(str(path), dev)
    assert back.ids() == pool.ids() and back.strategy == "kg-hard" and back.seed == 3
    with pytest.raises(KeyError):
        load_pool(str(path), dev[1:])


def test_example_validation():
    conv = Conversation((("patient", "x"),), "a")
    with pytest.raises(ValueError):
        ICLExample(conv, ())
    with pytest.raises(ValueError):
        ICLExample(conv, (("q?", 0.0),))
