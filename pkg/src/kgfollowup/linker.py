"""Link extracted clinical entity strings to knowledge-graph nodes.

Three stages with a strict priority: exact normalized-name match, token-set
Jaccard, then embedding cosine over the best string candidates.
"""

from __future__ import annotations

import logging
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .gateway import cosine_matrix
from .kg import KnowledgeGraph, normalize_name

logger = logging.getLogger(__name__)

EmbedFn = Callable[[Sequence[str]], np.ndarray]

normalize_term = normalize_name


@dataclass(frozen=True)
class LinkerConfig:
    string_threshold: float = 0.6
    embedding_threshold: float = 0.75
    candidate_cap: int = 50
    min_links: int = 1


@dataclass(frozen=True)
class ClinicalEntity:
    surface: str
    normalized: str = field(init=False)

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("entity surface must be non-empty")
        object.__setattr__(self, "normalized", normalize_term(self.surface))


@dataclass(frozen=True)
class LinkResult:
    entity: ClinicalEntity
    node: str | None
    score: float
    method: str  # exact | string-sim | embedding-sim | unlinked
    degraded: bool = False

    @property
    def linked(self) -> bool:
        return self.node is not None


def token_jaccard(a: str, b: str) -> float:
    ta, tb = set(a.split()), set(b.split())
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def _bigrams(s: str) -> frozenset[str]:
    s = s.replace(" ", "")
    return frozenset(s[i:i + 2] for i in range(len(s) - 1)) if len(s) > 1 else frozenset({s})


def char_jaccard(a: str, b: str) -> float:
    ga, gb = _bigrams(a), _bigrams(b)
    return len(ga & gb) / len(ga | gb) if ga and gb else 0.0


class _NameTable:
    """Per-graph normalized names and token index, built once."""

    def __init__(self, graph: KnowledgeGraph):
        self.names = sorted(graph.name_index)
        self.by_token: dict[str, list[str]] = {}
        for name in self.names:
            for tok in set(name.split()):
                self.by_token.setdefault(tok, []).append(name)
        self.grams = {name: _bigrams(name) for name in self.names}


_TABLES: "weakref.WeakKeyDictionary[KnowledgeGraph, _NameTable]" = weakref.WeakKeyDictionary()
_TABLES_LOCK = threading.Lock()


def _table(graph: KnowledgeGraph) -> _NameTable:
    with _TABLES_LOCK:
        table = _TABLES.get(graph)
        if table is None:
            table = _TABLES[graph] = _NameTable(graph)
        return table


def _allowed(graph: KnowledgeGraph, node_ids: Iterable[str], categories: Sequence[str] | None) -> list[str]:
    ids = sorted(node_ids)
    if not categories:
        return ids
    cats = [c.lower() for c in categories]
    return [n for n in ids if any(c in graph.nodes[n].category.lower() for c in cats)]


def link_entity(
    entity: ClinicalEntity | str,
    graph: KnowledgeGraph,
    embedder: EmbedFn | None,
    config: LinkerConfig = LinkerConfig(),
    categories: Sequence[str] | None = None,
) -> LinkResult:
    """Link one entity; ``categories`` restricts candidates by node category substring."""
    if isinstance(entity, str):
        entity = ClinicalEntity(entity)
    term = entity.normalized
    table = _table(graph)

    exact = _allowed(graph, graph.name_index.get(term, ()), categories)
    if exact:
        return LinkResult(entity, exact[0], 1.0, "exact")

    # stage 2: token-set Jaccard over names sharing at least one token
    best: tuple[float, str] | None = None
    shared = {name for tok in set(term.split()) for name in table.by_token.get(tok, ())}
    for name in shared:
        score = token_jaccard(term, name)
        if score < config.string_threshold:
            continue
        for nid in _allowed(graph, graph.name_index[name], categories):
            if best is None or score > best[0] or (score == best[0] and nid < best[1]):
                best = (score, nid)
    if best is not None:
        return LinkResult(entity, best[1], best[0], "string-sim")

    if embedder is None:
        return LinkResult(entity, None, 0.0, "unlinked")

    # stage 3: cosine over the top string candidates (token and character overlap)
    grams = _bigrams(term)
    scored = []
    for name in table.names:
        g = table.grams[name]
        union = len(grams | g)
        s = max(token_jaccard(term, name), len(grams & g) / union if union else 0.0)
        if s > 0:
            scored.append((-s, name))
    scored.sort()
    candidates: list[tuple[str, str]] = []
    for _, name in scored:
        for nid in _allowed(graph, graph.name_index[name], categories):
            candidates.append((nid, name))
        if len(candidates) >= config.candidate_cap:
            break
    candidates = candidates[: config.candidate_cap]
    if not candidates:
        return LinkResult(entity, None, 0.0, "unlinked")
    try:
        vecs = embedder([term] + [graph.nodes[nid].name for nid, _ in candidates])
    except Exception as exc:  # fall back to string-only linking
        logger.warning("embedder failed for %r: %s", entity.surface, exc)
        return LinkResult(entity, None, 0.0, "unlinked", degraded=True)
    sims = cosine_matrix(vecs[:1], vecs[1:])[0]
    best_emb: tuple[float, str] | None = None
    for (nid, _), sim in zip(candidates, sims):
        sim = float(sim)
        if best_emb is None or sim > best_emb[0] or (sim == best_emb[0] and nid < best_emb[1]):
            best_emb = (sim, nid)
    if best_emb is not None and best_emb[0] >= config.embedding_threshold:
        return LinkResult(entity, best_emb[1], min(1.0, best_emb[0]), "embedding-sim")
    return LinkResult(entity, None, 0.0, "unlinked")


def link_all(
    entities: Sequence[ClinicalEntity | str],
    graph: KnowledgeGraph,
    embedder: EmbedFn | None,
    config: LinkerConfig = LinkerConfig(),
) -> tuple[list[LinkResult], bool]:
    """Link every entity in order; the flag is True when fewer than ``min_links`` linked."""
    results = [link_entity(e, graph, embedder, config) for e in entities if str(getattr(e, "surface", e)).strip()]
    linked = sum(r.linked for r in results)
    return results, linked < max(1, config.min_links)
