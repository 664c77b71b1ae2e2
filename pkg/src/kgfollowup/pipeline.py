"""Follow-up question generation: preliminary, EHR-guided KG, DDX and DDX-guided KG channels.

The union of the four channels is returned in the fixed order ``pre, ehr-kg, ddx,
ddx-kg``. Channels degrade to empty lists with flags instead of raising.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .data import CHANNELS, Conversation, FollowupQuestion, QuestionSet
from .gateway import LLMGateway, PromptRequest, cosine_matrix
from .kg import KnowledgeGraph, normalize_name
from .linker import LinkerConfig, LinkResult, link_all, link_entity
from .prompts import render_prompt
from .search import ReasoningPath, bfs_subgraph, enumerate_shortest_paths, intersect_subgraphs

logger = logging.getLogger(__name__)

MODES = ("kg-followup", "followupq", "zero-shot-u", "zero-shot-k")
EHR_GUIDANCE = ("intersected", "similar", "triplets")

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class PipelineConfig:
    mode: str = "kg-followup"
    n_pre: int = 20
    k1: int = 10
    k2: int = 30
    bfs_depth: int = 2
    n_best: int = 2
    n_worst: int = 2
    per_diagnosis: int = 2
    t: int = 4
    budget: int = 20
    zero_shot_k: int = 20
    channels: dict[str, bool] = field(default_factory=lambda: {c: True for c in CHANNELS})
    ehr_guidance: str = "intersected"
    max_rank_candidates: int = 100
    diagnosis_categories: tuple[str, ...] = ("disease",)
    path_sample_seed: int | None = None
    consolidation: str = "merge"
    icl_seed: int = 0
    kmeans_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.ehr_guidance not in EHR_GUIDANCE:
            raise ValueError(f"unknown ehr guidance {self.ehr_guidance!r}")
        counts = ("n_pre", "k1", "k2", "bfs_depth", "n_best", "n_worst", "per_diagnosis", "t", "zero_shot_k")
        for name in counts:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        self.channels = {c: bool(self.channels.get(c, True)) for c in CHANNELS}
        self.diagnosis_categories = tuple(self.diagnosis_categories)

    def enabled(self, channel: str) -> bool:
        if self.mode == "followupq" and channel in ("ehr-kg", "ddx-kg"):
            return False
        return self.channels[channel]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["diagnosis_categories"] = list(self.diagnosis_categories)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class RunTrace:
    """Thread-safe counter of graph-search invocations for one run."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counts: Counter[str] = Counter()
        self.path_counts: list[int] = []

    def record(self, op: str, n_paths: int | None = None) -> None:
        with self._lock:
            self.counts[op] += 1
            if n_paths is not None:
                self.path_counts.append(n_paths)

    @property
    def graph_search_calls(self) -> int:
        return sum(self.counts.values())


@dataclass
class ChannelResult:
    questions: list[FollowupQuestion] = field(default_factory=list)
    flags: dict[str, Any] = field(default_factory=dict)


@dataclass
class Extraction:
    entities: list[str]
    links: list[LinkResult]
    hard_case: bool
    flags: dict[str, Any] = field(default_factory=dict)

    @property
    def seeds(self) -> list[str]:
        return list(dict.fromkeys(r.node for r in self.links if r.node is not None))


@dataclass
class DiagnosisSet:
    best: list[str]
    worst: list[str]
    linked: dict[str, str | None] = field(default_factory=dict)

    def union(self) -> list[str]:
        seen: dict[str, str] = {}
        for d in self.best + self.worst:
            seen.setdefault(normalize_name(d), d)
        return list(seen.values())


@dataclass
class PipelineResult:
    questions: QuestionSet
    metadata: dict[str, Any]
    extraction: Extraction | None = None
    diagnoses: DiagnosisSet | None = None


def pmap(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> list[R]:
    """Order-preserving map, threaded when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def prompt_examples(examples: Iterable[Any]) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """ICL examples as (conversation text, questions) pairs for a prompt request."""
    out = []
    for ex in examples:
        if isinstance(ex, tuple):
            conv, qs = ex
            out.append((conv, tuple(qs)))
        else:
            out.append((ex.conversation.render(), tuple(q for q, _ in ex.ground_truth)))
    return tuple(out)


def _questions(texts: Iterable[str], channel: str, provenance: Sequence[str] = ()) -> list[FollowupQuestion]:
    return [FollowupQuestion(t, channel, tuple(provenance)) for t in texts if t.strip()]


def _numbered(items: Iterable[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(items, 1))


def _apply_ranking(ranking: Sequence[int], n: int) -> list[int]:
    """0-based order: valid ranked indices first, then the rest in identity order."""
    order = [r - 1 for r in ranking if 1 <= r <= n]
    order = list(dict.fromkeys(order))
    return order + [i for i in range(n) if i not in set(order)]


# -- preliminary ---------------------------------------------------------------


def preliminary_questions(conversation: Conversation, gateway: LLMGateway, icl_examples: Sequence[Any],
                          n_pre: int, unrestricted: bool = False) -> ChannelResult:
    """Single generate call for clarification questions from internal knowledge."""
    if n_pre == 0 and not unrestricted:
        return ChannelResult(flags={"requested": 0})
    if unrestricted:
        system, user = render_prompt("zero_shot_u", conversation=conversation.render())
    else:
        system, user = render_prompt("preliminary", conversation=conversation.render(), count=n_pre)
    comp = gateway.complete(PromptRequest("generate", system, user, prompt_examples(icl_examples),
                                          meta={"channel": "pre"}))
    flags: dict[str, Any] = {"requested": None if unrestricted else n_pre}
    if not comp.parseable:
        flags["unparseable"] = True
        return ChannelResult(flags=flags)
    flags["parsed"] = len(comp.parsed)
    return ChannelResult(_questions(comp.parsed, "pre"), flags)


# -- EHR-guided KG ---------------------------------------------------------------


def extract_and_link(conversation: Conversation, graph: KnowledgeGraph, gateway: LLMGateway,
                     linker: LinkerConfig = LinkerConfig()) -> Extraction:
    system, user = render_prompt("extract", conversation=conversation.render())
    comp = gateway.complete(PromptRequest("extract", system, user, meta={"channel": "extract"}))
    flags: dict[str, Any] = {}
    if not comp.parseable:
        flags["extraction_failed"] = True
        return Extraction([], [], True, flags)
    entities = [e for e in comp.parsed if normalize_name(e)]
    links, hard = link_all(entities, graph, gateway.embed, linker)
    if any(r.degraded for r in links):
        flags["degraded_linking"] = True
    return Extraction(entities, links, hard, flags)


def _rank(gateway: LLMGateway, conversation: Conversation, labels: list[str], keep: int,
          meta: dict[str, Any]) -> tuple[list[int], bool]:
    if not labels or keep == 0:
        return [], True
    system, user = render_prompt("rank_entity", conversation=conversation.render(), candidates=_numbered(labels))
    comp = gateway.complete(PromptRequest("rank-entity", system, user, meta=meta | {"n_candidates": len(labels)}))
    order = _apply_ranking(comp.parsed if comp.parseable else [], len(labels))
    return order[:keep], comp.parseable


def _concept_candidates(graph: KnowledgeGraph, extraction: Extraction, config: PipelineConfig,
                        trace: RunTrace | None) -> tuple[list[str], dict[str, Any]]:
    seeds = extraction.seeds
    flags: dict[str, Any] = {}
    subgraphs = []
    for s in seeds:
        subgraphs.append(bfs_subgraph(graph, s, config.bfs_depth))
        if trace:
            trace.record("bfs_subgraph")
    shared = intersect_subgraphs(subgraphs)
    if trace:
        trace.record("intersect_subgraphs")
    flags["intersected"] = len(shared)
    if shared:
        closeness = {n: sum(sg.members[n] for sg in subgraphs) for n in shared}
        ordered = sorted(shared, key=lambda n: (closeness[n], n))
    else:
        flags["fallback"] = "one-hop-union"
        union = {n for s in seeds for n in graph.neighbor_ids(s)} - set(seeds)
        ordered = sorted(union)
    return ordered[: config.max_rank_candidates], flags


def ehr_kg_questions(conversation: Conversation, graph: KnowledgeGraph, gateway: LLMGateway,
                     linker: LinkerConfig, config: PipelineConfig, icl_examples: Sequence[Any] = (),
                     extraction: Extraction | None = None, trace: RunTrace | None = None,
                     ) -> tuple[ChannelResult, Extraction]:
    """Questions conditioned on top-ranked KG concepts associated with the extracted entities."""
    if extraction is None:
        extraction = extract_and_link(conversation, graph, gateway, linker)
    flags: dict[str, Any] = dict(extraction.flags)
    if extraction.hard_case:
        flags["hard_case"] = True
        return ChannelResult(flags=flags), extraction

    meta = {"channel": "ehr-kg"}
    seeds = extraction.seeds
    if config.ehr_guidance == "triplets":
        triplets = []
        for s in seeds:
            for nbr, rel in sorted(graph.neighbors(s), key=lambda x: (x[0], x[1])):
                triplets.append((s, rel, nbr))
        triplets = triplets[: config.max_rank_candidates]
        labels = [f"{graph.name_of(a)} —[{r}]— {graph.name_of(b)}" for a, r, b in triplets]
        order, ok = _rank(gateway, conversation, labels, config.k1, meta)
        chosen_labels = [labels[i] for i in order]
        provenance = [f"{triplets[i][0]}|{triplets[i][1]}|{triplets[i][2]}" for i in order]
        header = "Knowledge graph triplets (rationale):"
    else:
        if config.ehr_guidance == "similar":
            candidates = _similar_concepts(graph, gateway, extraction, config.max_rank_candidates)
            flags["retrieved"] = len(candidates)
        else:
            candidates, cflags = _concept_candidates(graph, extraction, config, trace)
            flags.update(cflags)
        labels = [graph.name_of(n) for n in candidates]
        order, ok = _rank(gateway, conversation, labels, config.k1, meta)
        chosen_labels = [labels[i] for i in order]
        provenance = [candidates[i] for i in order]
        header = "Knowledge graph concepts:"
    if not ok:
        flags["rank_fallback"] = "identity"
    flags["concepts"] = len(chosen_labels)
    if not chosen_labels:
        flags["no_concepts"] = True
        return ChannelResult(flags=flags), extraction

    system, user = render_prompt("ehr_generate", conversation=conversation.render(), guidance_header=header,
                                 guidance="\n".join(f"- {c}" for c in chosen_labels))
    comp = gateway.complete(PromptRequest("generate", system, user, prompt_examples(icl_examples),
                                          meta=meta | {"n_concepts": len(chosen_labels)}))
    if not comp.parseable:
        flags["unparseable"] = True
        return ChannelResult(flags=flags), extraction
    return ChannelResult(_questions(comp.parsed, "ehr-kg", provenance), flags), extraction


def _similar_concepts(graph: KnowledgeGraph, gateway: LLMGateway, extraction: Extraction, cap: int) -> list[str]:
    """Nodes whose names are closest (cosine) to any extracted entity, seeds excluded."""
    seeds = set(extraction.seeds)
    ids = [n for n in sorted(graph.nodes) if n not in seeds]
    if not ids or not extraction.entities:
        return []
    ent = gateway.embed(extraction.entities)
    names = gateway.embed([graph.name_of(n) for n in ids])
    best = cosine_matrix(names, ent).max(axis=1)
    order = sorted(range(len(ids)), key=lambda i: (-best[i], ids[i]))
    return [ids[i] for i in order[:cap] if best[i] > 0]


# -- DDX ------------------------------------------------------------------------


def differential_diagnoses(conversation: Conversation, gateway: LLMGateway, config: PipelineConfig,
                           ) -> tuple[DiagnosisSet, dict[str, Any]]:
    flags: dict[str, Any] = {}
    halves = {}
    for role, count, template in (("ddx-best", config.n_best, "ddx_best"), ("ddx-worst", config.n_worst, "ddx_worst")):
        if count == 0:
            halves[role] = []
            continue
        system, user = render_prompt(template, conversation=conversation.render(), count=count)
        comp = gateway.complete(PromptRequest(role, system, user, meta={"channel": "ddx"}))
        if not comp.parseable:
            flags[f"{role}_unparseable"] = True
            halves[role] = []
        else:
            halves[role] = comp.parsed[:count]
    return DiagnosisSet(halves["ddx-best"], halves["ddx-worst"]), flags


def ddx_questions(conversation: Conversation, gateway: LLMGateway, icl_examples: Sequence[Any],
                  config: PipelineConfig, diagnoses: DiagnosisSet | None = None, jobs: int = 1,
                  ) -> tuple[ChannelResult, DiagnosisSet]:
    """Elimination questions for each best-case and worst-case diagnosis."""
    flags: dict[str, Any] = {}
    if diagnoses is None:
        diagnoses, flags = differential_diagnoses(conversation, gateway, config)
    targets = diagnoses.union()
    flags["diagnoses"] = len(targets)
    if config.per_diagnosis == 0 or not targets:
        return ChannelResult(flags=flags), diagnoses
    icl = prompt_examples(icl_examples)

    def eliminate(dx: str) -> list[FollowupQuestion]:
        system, user = render_prompt("eliminate", conversation=conversation.render(), diagnosis=dx,
                                     count=config.per_diagnosis)
        comp = gateway.complete(PromptRequest("eliminate", system, user, icl, meta={"channel": "ddx", "diagnosis": dx}))
        if not comp.parseable:
            return []
        return _questions(comp.parsed[: config.per_diagnosis], "ddx", [dx])

    per_dx = pmap(eliminate, targets, jobs)
    flags["eliminate_failures"] = sum(1 for q in per_dx if not q)
    return ChannelResult([q for qs in per_dx for q in qs], flags), diagnoses


# -- DDX-guided KG ---------------------------------------------------------------


def ddx_kg_questions(conversation: Conversation, graph: KnowledgeGraph, gateway: LLMGateway,
                     linker: LinkerConfig, extraction: Extraction, diagnoses: DiagnosisSet,
                     config: PipelineConfig, icl_examples: Sequence[Any] = (), trace: RunTrace | None = None,
                     jobs: int = 1) -> ChannelResult:
    """Questions grounded in the most relevant shortest path for each entity/diagnosis pair."""
    flags: dict[str, Any] = {}
    sources = extraction.seeds
    targets = diagnoses.union()
    for dx in targets:
        res = link_entity(dx, graph, gateway.embed, linker, categories=config.diagnosis_categories)
        diagnoses.linked[dx] = res.node
    pairs, skipped = [], 0
    for s in sources:
        for dx in targets:
            d = diagnoses.linked.get(dx)
            if d is None or d == s:
                skipped += 1
            else:
                pairs.append((s, d))
    flags["pairs"] = len(pairs)

    def best_path(pair: tuple[str, str]) -> ReasoningPath | None:
        paths = enumerate_shortest_paths(graph, pair[0], pair[1], max(1, config.k2), config.path_sample_seed)
        if trace:
            trace.record("enumerate_shortest_paths", len(paths))
        if not paths:
            return None
        system, user = render_prompt(
            "rank_path", conversation=conversation.render(), source=graph.name_of(pair[0]),
            target=graph.name_of(pair[1]), candidates=_numbered(p.render(graph) for p in paths))
        comp = gateway.complete(PromptRequest("rank-path", system, user,
                                              meta={"channel": "ddx-kg", "n_candidates": len(paths)}))
        return paths[_apply_ranking(comp.parsed if comp.parseable else [], len(paths))[0]]

    selected = pmap(best_path, pairs, jobs)
    skipped += sum(p is None for p in selected)
    flags["skipped_pairs"] = skipped
    chosen: dict[tuple[str, ...], ReasoningPath] = {}
    for p in selected:
        if p is not None:
            chosen.setdefault(p.nodes, p)
    if not chosen:
        flags["all_pairs_skipped"] = True
        return ChannelResult(flags=flags)
    paths = list(chosen.values())
    interior = list(dict.fromkeys(n for p in paths for n in p.interior))
    system, user = render_prompt(
        "ddx_kg_generate", conversation=conversation.render(),
        paths="\n".join(f"- {p.render(graph)}" for p in paths),
        interior="\n".join(f"- {graph.name_of(n)}" for n in interior) or "- (none)")
    comp = gateway.complete(PromptRequest("generate", system, user, prompt_examples(icl_examples),
                                          meta={"channel": "ddx-kg", "n_paths": len(paths)}))
    flags["paths"] = len(paths)
    if not comp.parseable:
        flags["unparseable"] = True
        return ChannelResult(flags=flags)
    return ChannelResult(_questions(comp.parsed, "ddx-kg", [p.descriptor() for p in paths]), flags)


# -- union --------------------------------------------------------------------


def run_pipeline(conversation: Conversation, graph: KnowledgeGraph | None, gateway: LLMGateway,
                 linker: LinkerConfig, icl_examples: Sequence[Any], config: PipelineConfig,
                 jobs: int = 1, trace: RunTrace | None = None) -> PipelineResult:
    """Generate the pre-consolidation question set for one conversation."""
    trace = trace or RunTrace()
    icl = list(icl_examples)[: config.t]
    meta: dict[str, Any] = {"config_hash": config.hash(), "mode": config.mode, "icl_examples": len(icl)}

    if config.mode in ("zero-shot-u", "zero-shot-k"):
        unrestricted = config.mode == "zero-shot-u"
        res = preliminary_questions(conversation, gateway, icl, config.zero_shot_k, unrestricted=unrestricted)
        meta.update(channels={"pre": res.flags}, counts=QuestionSet(res.questions).counts(), graph_search_calls=0)
        return PipelineResult(QuestionSet(res.questions, meta["config_hash"]), meta)

    use_kg = graph is not None and (config.enabled("ehr-kg") or config.enabled("ddx-kg"))
    need_dx = config.enabled("ddx") or (use_kg and config.enabled("ddx-kg"))

    def phase_pre() -> ChannelResult:
        if not config.enabled("pre"):
            return ChannelResult()
        return preliminary_questions(conversation, gateway, icl, config.n_pre)

    def phase_ehr() -> tuple[ChannelResult, Extraction | None]:
        if not use_kg:
            return ChannelResult(), None
        extraction = extract_and_link(conversation, graph, gateway, linker)
        if not config.enabled("ehr-kg"):
            return ChannelResult(flags=dict(extraction.flags)), extraction
        return ehr_kg_questions(conversation, graph, gateway, linker, config, icl, extraction, trace)

    def phase_ddx() -> tuple[ChannelResult, DiagnosisSet | None]:
        if not need_dx:
            return ChannelResult(), None
        diagnoses, dflags = differential_diagnoses(conversation, gateway, config)
        if not config.enabled("ddx"):
            return ChannelResult(flags=dflags), diagnoses
        res, diagnoses = ddx_questions(conversation, gateway, icl, config, diagnoses, jobs)
        res.flags.update(dflags)
        return res, diagnoses

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=3) as ex:
            f_pre, f_ehr, f_ddx = ex.submit(phase_pre), ex.submit(phase_ehr), ex.submit(phase_ddx)
            pre, (ehr, extraction), (ddx, diagnoses) = f_pre.result(), f_ehr.result(), f_ddx.result()
    else:
        pre, (ehr, extraction), (ddx, diagnoses) = phase_pre(), phase_ehr(), phase_ddx()

    ddx_kg = ChannelResult()
    if use_kg and config.enabled("ddx-kg") and extraction is not None and diagnoses is not None:
        if extraction.hard_case:
            ddx_kg.flags["hard_case"] = True
        else:
            ddx_kg = ddx_kg_questions(conversation, graph, gateway, linker, extraction, diagnoses, config,
                                      icl, trace, jobs)

    questions = pre.questions + ehr.questions + ddx.questions + ddx_kg.questions
    qs = QuestionSet(questions, meta["config_hash"])
    meta.update(
        counts=qs.counts(),
        channels={"pre": pre.flags, "ehr-kg": ehr.flags, "ddx": ddx.flags, "ddx-kg": ddx_kg.flags},
        hard_case=bool(extraction.hard_case) if extraction is not None else None,
        entities=extraction.entities if extraction is not None else [],
        linked=[r.node for r in extraction.links] if extraction is not None else [],
        diagnoses=diagnoses.union() if diagnoses is not None else [],
        graph_search_calls=trace.graph_search_calls,
    )
    return PipelineResult(qs, meta, extraction, diagnoses)
