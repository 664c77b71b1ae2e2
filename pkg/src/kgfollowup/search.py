"""Depth-bounded BFS subgraphs, subgraph intersection and shortest-path enumeration."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterator, Sequence

from .kg import KnowledgeGraph

# hard cap on paths materialized when sampling instead of truncating
SAMPLE_ENUMERATION_CAP = 100_000


@dataclass(frozen=True, slots=True)
class Subgraph:
    seed: str
    depth: int
    members: dict[str, int] = field(hash=False)

    def nodes(self) -> frozenset[str]:
        return frozenset(self.members)


@dataclass(frozen=True, slots=True)
class ReasoningPath:
    nodes: tuple[str, ...]
    relations: tuple[str, ...]

    @property
    def source(self) -> str:
        return self.nodes[0]

    @property
    def target(self) -> str:
        return self.nodes[-1]

    @property
    def interior(self) -> tuple[str, ...]:
        return self.nodes[1:-1]

    def __len__(self) -> int:
        return len(self.relations)

    def render(self, graph: KnowledgeGraph) -> str:
        """``source —[relation]→ node —[relation]→ target`` using node names."""
        parts = [graph.name_of(self.nodes[0])]
        for rel, nid in zip(self.relations, self.nodes[1:]):
            parts.append(f"—[{rel}]→ {graph.name_of(nid)}")
        return " ".join(parts)

    def descriptor(self) -> str:
        return " > ".join(self.nodes)


def _hop_distances(graph: KnowledgeGraph, seed: str, depth: int | None = None) -> dict[str, int]:
    dist = {seed: 0}
    queue = deque([seed])
    while queue:
        u = queue.popleft()
        d = dist[u]
        if depth is not None and d >= depth:
            continue
        for v in graph.neighbor_ids(u):
            if v not in dist:
                dist[v] = d + 1
                queue.append(v)
    return dist


def bfs_subgraph(graph: KnowledgeGraph, seed: str, depth: int) -> Subgraph:
    """All nodes within ``depth`` hops of ``seed`` with their exact hop distance."""
    if seed not in graph:
        raise KeyError(f"unknown seed node {seed!r}")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    return Subgraph(seed, depth, _hop_distances(graph, seed, depth))


def intersect_subgraphs(subgraphs: Sequence[Subgraph]) -> set[str]:
    """Nodes shared by every subgraph, excluding all of the seeds."""
    if not subgraphs:
        raise ValueError("intersect_subgraphs needs at least one subgraph")
    shared = reduce(lambda acc, sg: acc & sg.members.keys(), subgraphs[1:], set(subgraphs[0].members))
    return shared - {sg.seed for sg in subgraphs}


def _iter_shortest(graph: KnowledgeGraph, source: str, target: str) -> Iterator[tuple[str, ...]]:
    from_src = _hop_distances(graph, source)
    if target not in from_src:
        return
    length = from_src[target]
    to_tgt = _hop_distances(graph, target, length)

    # DFS restricted to the shortest-path DAG; sorted children give lexicographic order
    stack: list[tuple[str, ...]] = [(source,)]
    while stack:
        path = stack.pop()
        u = path[-1]
        if u == target:
            yield path
            continue
        d = len(path)
        nxt = [v for v in graph.neighbor_ids(u) if from_src.get(v) == d and to_tgt.get(v) == length - d]
        for v in reversed(nxt):
            stack.append(path + (v,))


def enumerate_shortest_paths(
    graph: KnowledgeGraph,
    source: str,
    target: str,
    limit: int,
    sample_seed: int | None = None,
) -> list[ReasoningPath]:
    """Minimal-hop simple paths from ``source`` to ``target``.

    Paths come out in lexicographic order of their node-id sequences and the first
    ``limit`` are kept. With ``sample_seed`` set, ``limit`` paths are instead drawn
    uniformly (seeded) from the full shortest-path set and returned sorted.
    Unreachable targets give an empty list.
    """
    for nid in (source, target):
        if nid not in graph:
            raise KeyError(f"unknown node id {nid!r}")
    if source == target:
        raise ValueError("source and target must differ")
    if limit < 1:
        raise ValueError("limit must be >= 1")

    paths = _iter_shortest(graph, source, target)
    if sample_seed is None:
        chosen = []
        for p in paths:
            chosen.append(p)
            if len(chosen) == limit:
                break
    else:
        pool = []
        for p in paths:
            pool.append(p)
            if len(pool) >= SAMPLE_ENUMERATION_CAP:
                break
        chosen = sorted(random.Random(sample_seed).sample(pool, min(limit, len(pool))))
    return [
        ReasoningPath(p, tuple(graph.relation_between(a, b) for a, b in zip(p, p[1:])))
        for p in chosen
    ]
