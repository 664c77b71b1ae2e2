"""Independent reference implementations used to check the library.

None of these share code with the package: they work from plain edge lists
and straightforward (slow) definitions.
"""

from __future__ import annotations

import itertools
import math
import random
from typing import Iterable, Sequence

INF = math.inf


def floyd_warshall(nodes: Sequence[str], edges: Iterable[tuple[str, str]]) -> dict[tuple[str, str], float]:
    dist = {(u, v): (0 if u == v else INF) for u in nodes for v in nodes}
    for a, b in edges:
        if a != b:
            dist[a, b] = dist[b, a] = 1
    for k in nodes:
        for i in nodes:
            dik = dist[i, k]
            if dik == INF:
                continue
            for j in nodes:
                if dik + dist[k, j] < dist[i, j]:
                    dist[i, j] = dik + dist[k, j]
    return dist


def all_simple_paths(nodes: Sequence[str], edges: Iterable[tuple[str, str]], source: str,
                     target: str) -> list[tuple[str, ...]]:
    adj: dict[str, set[str]] = {n: set() for n in nodes}
    for a, b in edges:
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    out = []

    def walk(path: list[str]) -> None:
        u = path[-1]
        if u == target:
            out.append(tuple(path))
            return
        for v in adj[u]:
            if v not in path:
                path.append(v)
                walk(path)
                path.pop()

    walk([source])
    return out


def minimal_paths(nodes, edges, source, target, limit):
    paths = all_simple_paths(nodes, edges, source, target)
    if not paths:
        return []
    shortest = min(len(p) for p in paths)
    return sorted(p for p in paths if len(p) == shortest)[:limit]


def random_graph(rng: random.Random, n: int, p: float) -> tuple[list[str], list[tuple[str, str]]]:
    nodes = [f"n{i:02d}" for i in range(n)]
    edges = [(a, b) for a, b in itertools.combinations(nodes, 2) if rng.random() < p]
    return nodes, edges


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv) if nu and nv else 0.0


def bag_cosine(a: Sequence[str], b: Sequence[str]) -> float:
    """Cosine between two token multisets (exact, no hashing)."""
    vocab = sorted(set(a) | set(b))
    return cosine([a.count(t) for t in vocab], [b.count(t) for t in vocab])


def jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a | b else 0.0


def best_two_partition(points: Sequence[Sequence[float]]) -> tuple[float, frozenset[int]]:
    """Minimum within-cluster sum of squares over every split into two non-empty groups."""
    n = len(points)

    def sse(idx):
        dims = len(points[0])
        c = [sum(points[i][d] for i in idx) / len(idx) for d in range(dims)]
        return sum((points[i][d] - c[d]) ** 2 for i in idx for d in range(dims))

    best = (INF, frozenset())
    # fix point 0 in the first group to skip mirrored splits
    for mask in range(0, 2 ** (n - 1) - 1):
        first = [0] + [i for i in range(1, n) if not (mask >> (i - 1)) & 1]
        second = [i for i in range(1, n) if (mask >> (i - 1)) & 1]
        if not second:
            continue
        total = sse(first) + sse(second)
        if total < best[0] - 1e-12:
            best = (total, frozenset(first))
    return best
