from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import pytest

from kgfollowup.gateway import LLMGateway
from kgfollowup.kg import KnowledgeGraph, read_graph_file
from kgfollowup.providers import HashingEmbedder, ScriptedProvider

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy"


def make_graph(edges: Iterable[tuple[str, str]] | Iterable[tuple[str, str, str]],
               nodes: Sequence[str] = (), names: dict[str, str] | None = None,
               categories: dict[str, str] | None = None) -> KnowledgeGraph:
    """Small graph from id pairs; names default to the id, relation defaults to ``r``."""
    edges = [tuple(e) if len(e) == 3 else (e[0], e[1], "r") for e in edges]
    ids = list(dict.fromkeys([*nodes, *(x for e in edges for x in e[:2])]))
    names = names or {}
    categories = categories or {}
    return KnowledgeGraph.from_records(
        [(i, names.get(i, i), categories.get(i, "concept")) for i in ids], edges)


def scripted_gateway(rules: Sequence[dict] = (), responses: dict[str, str] | None = None,
                     directory: str | Path | None = None, embedder=None, **kw) -> LLMGateway:
    provider = ScriptedProvider(directory, responses, rules)
    kw.setdefault("retry_backoff", 0)
    return LLMGateway(provider, embedder or HashingEmbedder(), **kw)


@pytest.fixture(scope="session")
def toy_graph() -> KnowledgeGraph:
    return read_graph_file(str(TOY / "kg.csv"))


@pytest.fixture
def toy_gateway() -> LLMGateway:
    return scripted_gateway(directory=TOY / "script")


# -- acceptance reporting: one PASS/FAIL line per criterion ---------------------

_CRITERIA: dict[int, tuple[str, list[bool]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, (title, []))
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        status = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
