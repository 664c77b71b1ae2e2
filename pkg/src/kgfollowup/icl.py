"""In-context example pools built from KG-informed hard cases."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .data import BenchmarkInstance, Conversation
from .gateway import LLMGateway
from .kg import KnowledgeGraph
from .linker import LinkerConfig
from .pipeline import extract_and_link

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "kg-hard", "supervised-hard")


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True)
class ICLExample:
    conversation: Conversation
    ground_truth: tuple[tuple[str, float], ...]
    hardness: str = "none"
    source_recall: float | None = None

    def __post_init__(self):
        if not self.ground_truth:
            raise ValueError("ICL example needs ground-truth questions")
        if any(w <= 0 for _, w in self.ground_truth):
            raise ValueError("ICL example weights must be positive")

    @property
    def instance_id(self) -> str:
        return self.conversation.instance_id

    @classmethod
    def from_instance(cls, inst: BenchmarkInstance, hardness: str = "none",
                      source_recall: float | None = None) -> "ICLExample":
        return cls(inst.conversation, inst.truth, hardness, source_recall)


@dataclass(frozen=True)
class ICLPool:
    examples: tuple[ICLExample, ...]
    strategy: str
    seed: int = 0

    def __len__(self) -> int:
        return len(self.examples)

    def ids(self) -> list[str]:
        return [e.instance_id for e in self.examples]

    def to_record(self) -> dict[str, Any]:
        return {"strategy": self.strategy, "seed": self.seed, "example_ids": self.ids()}

    @classmethod
    def from_record(cls, record: Mapping[str, Any], dev: Sequence[BenchmarkInstance]) -> "ICLPool":
        """Hydrate a persisted pool against the dev instances it was built from."""
        by_id = {d.instance_id: d for d in dev}
        missing = [i for i in record["example_ids"] if i not in by_id]
        if missing:
            raise KeyError(f"pool references instances absent from the dev set: {missing[:5]}")
        hardness = {"kg-hard": "kg-hard", "supervised-hard": "supervised-hard"}.get(record["strategy"], "none")
        examples = tuple(ICLExample.from_instance(by_id[i], hardness) for i in record["example_ids"])
        return cls(examples, record["strategy"], int(record.get("seed", 0)))


def detect_hard(conversation: Conversation, graph: KnowledgeGraph, gateway: LLMGateway,
                linker: LinkerConfig = LinkerConfig()) -> bool:
    """True when no entity can be extracted or linked, so KG traversal is infeasible.

    Extraction failures count as hard.
    """
    extraction = extract_and_link(conversation, graph, gateway, linker)
    return extraction.hard_case or not extraction.entities


def build_pool(dev: Sequence[BenchmarkInstance], graph: KnowledgeGraph | None, gateway: LLMGateway | None,
               linker: LinkerConfig = LinkerConfig(), strategy: str = "kg-hard", seed: int = 0,
               recalls: Mapping[str, float] | None = None) -> ICLPool:
    """Assemble the example pool from dev instances.

    * ``random`` -- every dev instance
    * ``kg-hard`` -- instances flagged by :func:`detect_hard`
    * ``supervised-hard`` -- instances whose recorded recall is exactly 0
    """
    if not dev:
        raise ValueError("dev set is empty")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown pool strategy {strategy!r}")
    if strategy == "random":
        members = [ICLExample.from_instance(d) for d in dev]
    elif strategy == "kg-hard":
        if graph is None or gateway is None:
            raise ValueError("kg-hard pool needs a graph and a gateway")
        members = [ICLExample.from_instance(d, "kg-hard") for d in dev
                   if detect_hard(d.conversation, graph, gateway, linker)]
    else:
        if recalls is None:
            raise ValueError("supervised-hard pool needs per-instance recalls from a prior evaluation report")
        members = [ICLExample.from_instance(d, "supervised-hard", recalls[d.instance_id]) for d in dev
                   if d.instance_id in recalls and recalls[d.instance_id] == 0]
    if not members:
        raise EmptyPoolError(f"strategy {strategy!r} produced an empty pool; fall back to strategy 'random'")
    return ICLPool(tuple(members), strategy, seed)


def select_examples(pool: ICLPool | Sequence[ICLExample], t: int, seed: int = 0,
                    exclude: Sequence[str] = ()) -> list[ICLExample]:
    """Seeded uniform sample without replacement of ``min(t, len(pool))`` examples."""
    if t < 0:
        raise ValueError("t must be >= 0")
    examples = list(pool.examples if isinstance(pool, ICLPool) else pool)
    if exclude:
        examples = [e for e in examples if e.instance_id not in set(exclude)]
    if t == 0 or not examples:
        return []
    return random.Random(seed).sample(examples, min(t, len(examples)))


def save_pool(pool: ICLPool, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pool.to_record(), fh, sort_keys=True)
        fh.write("\n")


def load_pool(path: str, dev: Sequence[BenchmarkInstance]) -> ICLPool:
    with open(path, encoding="utf-8") as fh:
        return ICLPool.from_record(json.load(fh), dev)
