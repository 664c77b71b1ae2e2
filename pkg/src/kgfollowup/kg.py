"""Immutable biomedical knowledge graph: ingestion, lookup and a compact index format.

Two edge-list dialects are accepted:

* ``primekg`` -- PrimeKG column layout (``relation, display_relation, x_id, x_type,
  x_name, y_id, y_type, y_name``; extra columns such as ``x_index`` are tolerated).
* ``compact`` -- ``source_id, source_name, source_type, target_id, target_name,
  target_type, relation``.

The graph is treated as undirected. Duplicate rows and reversed duplicates collapse
to a single edge, self-loops are dropped and counted.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from typing import IO, Iterable

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"KGFIDX\x00\x01"

PRIMEKG_COLUMNS = ("relation", "display_relation", "x_id", "x_type", "x_name", "y_id", "y_type", "y_name")
COMPACT_COLUMNS = ("source_id", "source_name", "source_type", "target_id", "target_name", "target_type", "relation")

_PUNCT = re.compile(r"[!-/:-@\[-`{-~]")


class IngestionError(ValueError):
    """Raised when an edge list cannot be ingested."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def normalize_name(text: str) -> str:
    """Lowercase, replace ASCII punctuation with spaces, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


@dataclass(frozen=True, slots=True)
class KGNode:
    node_id: str
    name: str
    category: str = ""


@dataclass(frozen=True, slots=True, order=True)
class KGEdge:
    source: str
    target: str
    relation: str


@dataclass(slots=True)
class IngestStats:
    rows: int = 0
    duplicates: int = 0
    self_loops: int = 0
    name_conflicts: int = 0


class KnowledgeGraph:
    """Undirected node/edge store with adjacency and a normalized-name index.

    Build with :meth:`from_records` or :func:`load_graph`; instances are not meant
    to be mutated afterwards.
    """

    def __init__(self, nodes: dict[str, KGNode], edges: Iterable[KGEdge], stats: IngestStats | None = None):
        self.nodes: dict[str, KGNode] = dict(nodes)
        self.stats = stats or IngestStats()
        adjacency: dict[str, set[tuple[str, str]]] = {nid: set() for nid in self.nodes}
        canonical: set[KGEdge] = set()
        for e in edges:
            if e.source not in self.nodes or e.target not in self.nodes:
                raise IngestionError(f"edge references unknown node: {e}")
            if e.source == e.target:
                self.stats.self_loops += 1
                continue
            a, b = sorted((e.source, e.target))
            key = KGEdge(a, b, e.relation)
            if key in canonical:
                self.stats.duplicates += 1
                continue
            canonical.add(key)
            adjacency[a].add((b, e.relation))
            adjacency[b].add((a, e.relation))
        self.edges: tuple[KGEdge, ...] = tuple(sorted(canonical))
        self.adjacency: dict[str, frozenset[tuple[str, str]]] = {k: frozenset(v) for k, v in adjacency.items()}
        index: dict[str, list[str]] = {}
        for nid, node in self.nodes.items():
            index.setdefault(normalize_name(node.name), []).append(nid)
        self.name_index: dict[str, tuple[str, ...]] = {k: tuple(sorted(v)) for k, v in index.items()}
        self._sorted_adj: dict[str, tuple[str, ...]] = {}

    @classmethod
    def from_records(
        cls,
        nodes: Iterable[tuple[str, str, str] | KGNode],
        edges: Iterable[tuple[str, str, str] | KGEdge],
    ) -> "KnowledgeGraph":
        """Build from ``(node_id, name, category)`` and ``(source, target, relation)`` tuples."""
        node_map: dict[str, KGNode] = {}
        for n in nodes:
            node = n if isinstance(n, KGNode) else KGNode(*n)
            if not node.name:
                raise IngestionError(f"node {node.node_id!r} has an empty name")
            node_map.setdefault(node.node_id, node)
        return cls(node_map, (e if isinstance(e, KGEdge) else KGEdge(*e) for e in edges))

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def __repr__(self) -> str:
        return f"KnowledgeGraph(nodes={self.node_count}, edges={self.edge_count})"

    def get_node(self, node_id: str) -> KGNode | None:
        return self.nodes.get(node_id)

    def neighbors(self, node_id: str) -> frozenset[tuple[str, str]]:
        try:
            return self.adjacency[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def neighbor_ids(self, node_id: str) -> tuple[str, ...]:
        """Distinct neighbor ids in sorted order (cached)."""
        cached = self._sorted_adj.get(node_id)
        if cached is None:
            cached = tuple(sorted({n for n, _ in self.neighbors(node_id)}))
            self._sorted_adj[node_id] = cached
        return cached

    def relation_between(self, u: str, v: str) -> str | None:
        """Lexicographically smallest relation label on an edge u--v."""
        rels = [r for n, r in self.neighbors(u) if n == v]
        return min(rels) if rels else None

    def lookup_name(self, text: str) -> tuple[str, ...]:
        return self.name_index.get(normalize_name(text), ())

    def name_of(self, node_id: str) -> str:
        node = self.nodes.get(node_id)
        return node.name if node else node_id

    # -- index serialization ------------------------------------------------

    def to_index_bytes(self) -> bytes:
        payload = {
            "nodes": [[n.node_id, n.name, n.category] for n in sorted(self.nodes.values(), key=lambda n: n.node_id)],
            "edges": [[e.source, e.target, e.relation] for e in self.edges],
        }
        body = json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
        return INDEX_MAGIC + zlib.compress(body, 9)

    @classmethod
    def from_index_bytes(cls, data: bytes) -> "KnowledgeGraph":
        if not data.startswith(INDEX_MAGIC):
            raise IngestionError("not a kgfollowup index file (bad magic header)")
        payload = json.loads(zlib.decompress(data[len(INDEX_MAGIC):]).decode("utf-8"))
        return cls.from_records([tuple(n) for n in payload["nodes"]], [tuple(e) for e in payload["edges"]])


def _sniff_delimiter(header_line: str, delimiter: str | None) -> str:
    if delimiter:
        return delimiter
    return "\t" if "\t" in header_line else ","


def load_graph(source: IO[bytes] | IO[str] | bytes | str, format: str = "primekg", delimiter: str | None = None) -> KnowledgeGraph:
    """Parse a header-bearing delimited edge list into a :class:`KnowledgeGraph`.

    ``source`` may be a binary or text stream, or raw bytes/str content.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8-sig")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8-sig") if isinstance(raw, bytes) else raw
    if not text.strip():
        raise IngestionError("empty edge list")

    first_line = text.splitlines()[0]
    reader = csv.reader(io.StringIO(text), delimiter=_sniff_delimiter(first_line, delimiter))
    header = [h.strip() for h in next(reader)]
    required = {"primekg": PRIMEKG_COLUMNS, "compact": COMPACT_COLUMNS}.get(format)
    if required is None:
        raise IngestionError(f"unknown edge-list format {format!r}")
    missing = [c for c in required if c not in header]
    if missing:
        raise IngestionError(f"header missing columns {missing}", line=1)
    col = {name: i for i, name in enumerate(header)}
    if format == "primekg":
        src_id = "x_index" if "x_index" in col and "y_index" in col else "x_id"
        dst_id = "y_index" if src_id == "x_index" else "y_id"
        fields = (src_id, "x_name", "x_type", dst_id, "y_name", "y_type")
    else:
        fields = ("source_id", "source_name", "source_type", "target_id", "target_name", "target_type")

    stats = IngestStats()
    nodes: dict[str, KGNode] = {}
    edges: list[KGEdge] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} columns, got {len(row)}", line=lineno)
        stats.rows += 1
        sid, sname, stype, tid, tname, ttype = (row[col[f]].strip() for f in fields)
        relation = row[col["relation"]].strip()
        if not sid or not tid:
            raise IngestionError("empty node id", line=lineno)
        for nid, name, cat in ((sid, sname, stype), (tid, tname, ttype)):
            prev = nodes.get(nid)
            if prev is None:
                nodes[nid] = KGNode(nid, name or nid, cat)
            elif prev.name != (name or nid):
                stats.name_conflicts += 1
        edges.append(KGEdge(sid, tid, relation))
    if stats.rows == 0:
        raise IngestionError("edge list has a header but no rows")

    graph = KnowledgeGraph(nodes, edges, stats)
    if stats.self_loops:
        logger.warning("dropped %d self-loop row(s)", stats.self_loops)
    return graph


def read_graph_file(path: str, format: str = "primekg", delimiter: str | None = None) -> KnowledgeGraph:
    """Load either a compiled index (magic header) or a raw edge list from ``path``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(INDEX_MAGIC):
        return KnowledgeGraph.from_index_bytes(data)
    return load_graph(data, format=format, delimiter=delimiter)
