"""Benchmark loading, judging, weighted recall and baseline sweeps.

Weighted recall is the matched share of ground-truth weight mass::

    recall = sum(weight of matched truth questions) / sum(all truth weights)

A truth question counts as matched when the judge says at least one generated
question covers it. One generated question may cover several truth questions;
there is no precision term.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .consolidation import consolidate
from .data import BenchmarkInstance, Conversation, RecordError, read_jsonl
from .gateway import LLMGateway, PromptRequest, cosine_matrix
from .icl import ICLPool, select_examples
from .kg import KnowledgeGraph
from .linker import LinkerConfig
from .pipeline import PipelineConfig, RunTrace, pmap, run_pipeline
from .prompts import render_prompt

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodSpec:
    mode: str
    consolidate: bool
    pool_strategy: str | None = None


METHODS: dict[str, MethodSpec] = {
    "zero-shot-u": MethodSpec("zero-shot-u", False),
    "zero-shot-k": MethodSpec("zero-shot-k", False),
    "followupq": MethodSpec("followupq", True),
    "kg-followup": MethodSpec("kg-followup", True),
    "random-icl": MethodSpec("kg-followup", True, "random"),
    "active-icl": MethodSpec("kg-followup", True, "kg-hard"),
}
_ALIASES = {"followupq-style": "followupq", "+random-icl": "random-icl", "+active-icl": "active-icl"}


def resolve_method(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return name


# -- loading ------------------------------------------------------------------


def _truth_entries(raw: Any, dialect: str, rid: str) -> tuple[tuple[str, float], ...]:
    if not raw:
        raise RecordError("missing ground-truth questions", rid)
    out = []
    for item in raw:
        if isinstance(item, str):
            text, weight = item, 1.0
            if dialect == "weighted":
                raise RecordError(f"weighted record needs {{text, weight}} entries, got {item!r}", rid)
        else:
            text = item.get("text", item.get("question", ""))
            if dialect == "weighted":
                if "weight" not in item:
                    raise RecordError(f"missing weight for {text!r}", rid)
                weight = float(item["weight"])
            else:
                weight = 1.0
        if not str(text).strip():
            raise RecordError("empty ground-truth question", rid)
        if not weight > 0:
            raise RecordError(f"non-positive weight {weight!r} for {text!r}", rid)
        out.append((str(text).strip(), weight))
    return tuple(out)


def load_benchmark(source: IO[str] | Iterable[str] | str, dialect: str = "weighted") -> list[BenchmarkInstance]:
    """Read line-delimited benchmark records.

    ``dialect="weighted"`` requires ``truth: [{text, weight}]``; ``"unweighted"``
    accepts plain strings (or ``questions``) and assigns weight 1 throughout.
    """
    if dialect not in ("weighted", "unweighted"):
        raise ValueError(f"unknown benchmark dialect {dialect!r}")
    lines = source.splitlines() if isinstance(source, str) else source
    out = []
    for lineno, rec in read_jsonl(lines):
        rid = str(rec.get("instance_id", f"line{lineno}"))
        try:
            conv_obj = rec.get("conversation", rec.get("turns"))
            if conv_obj is None:
                raise RecordError("missing conversation", rid)
            conv = Conversation.from_obj(conv_obj, rid)
            conv = replace(conv, instance_id=rid)
            truth = _truth_entries(rec.get("truth", rec.get("questions")), dialect, rid)
        except RecordError as exc:
            raise RecordError(str(exc).split(": ", 1)[-1], rid, lineno) from None
        out.append(BenchmarkInstance(rid, conv, truth, rec.get("theme"), rec.get("split")))
    return out


def read_benchmark_file(path: str, dialect: str = "weighted") -> list[BenchmarkInstance]:
    with open(path, encoding="utf-8") as fh:
        return load_benchmark(fh, dialect)


# -- judging ------------------------------------------------------------------


@dataclass(frozen=True)
class MatchVerdict:
    truth_index: int
    matched: bool
    matched_by: int | None = None
    judge_rationale: str | None = None

    def __post_init__(self):
        if self.matched and self.matched_by is None:
            raise ValueError("a matched verdict needs matched_by")


class Judge(Protocol):
    name: str

    def judge(self, generated: Sequence[str], truth: Sequence[str]) -> tuple[list[MatchVerdict], dict[str, Any]]: ...


class EmbeddingJudge:
    """Deterministic judge: a truth question is matched when some generated question
    reaches cosine similarity >= ``threshold``."""

    def __init__(self, embed: Callable[[Sequence[str]], np.ndarray], threshold: float = 0.85):
        self.embed = embed
        self.threshold = threshold
        self.name = f"embedding@{threshold:g}"

    def judge(self, generated, truth):
        if not generated:
            return [MatchVerdict(i, False) for i in range(len(truth))], {}
        sims = cosine_matrix(self.embed(list(truth)), self.embed(list(generated)))
        verdicts = []
        for i, row in enumerate(sims):
            j = int(row.argmax())
            if row[j] >= self.threshold - 1e-12:
                verdicts.append(MatchVerdict(i, True, j, f"cosine={row[j]:.3f}"))
            else:
                verdicts.append(MatchVerdict(i, False))
        return verdicts, {}


class LLMJudge:
    """List-wise LLM judge: one prompt per instance covering all truth questions."""

    def __init__(self, gateway: LLMGateway):
        self.gateway = gateway
        self.name = f"llm:{gateway.model_for('judge') or gateway.provider.name}"

    def judge(self, generated, truth):
        if not generated:
            return [MatchVerdict(i, False) for i in range(len(truth))], {}
        system, user = render_prompt(
            "judge",
            generated="\n".join(f"G{i}. {q}" for i, q in enumerate(generated, 1)),
            truth="\n".join(f"T{i}. {q}" for i, q in enumerate(truth, 1)),
        )
        comp = self.gateway.complete(PromptRequest("judge", system, user))
        if not comp.parseable:
            return [MatchVerdict(i, False) for i in range(len(truth))], {"judge_unparseable": True}
        verdicts = []
        for i in range(len(truth)):
            g = comp.parsed.get(i + 1)
            if g is not None and 1 <= g <= len(generated):
                verdicts.append(MatchVerdict(i, True, g - 1))
            else:
                verdicts.append(MatchVerdict(i, False))
        return verdicts, {}


def match_questions(generated: Sequence[str], truth: Sequence[tuple[str, float]], judge: Judge) -> list[MatchVerdict]:
    verdicts, _ = judge.judge(list(generated), [t for t, _ in truth])
    return verdicts


def weighted_recall(verdicts: Sequence[MatchVerdict], truth: Sequence[tuple[str, float]]) -> float:
    if len(verdicts) != len(truth):
        raise ValueError("verdicts must align with truth")
    total = math.fsum(w for _, w in truth)
    if total <= 0:
        raise ValueError("total truth weight must be positive")
    return math.fsum(w for v, (_, w) in zip(verdicts, truth) if v.matched) / total


# -- benchmark runs -------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    judge: str
    config_hash: str
    rows: list[dict[str, Any]]
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> list[dict[str, Any]]:
        return [r for r in self.rows if r.get("error") is None]

    @property
    def failures(self) -> int:
        return len(self.rows) - len(self.completed)

    def _mean(self, key: str, rows: Sequence[dict[str, Any]] | None = None) -> float | None:
        rows = self.completed if rows is None else rows
        return math.fsum(r[key] for r in rows) / len(rows) if rows else None

    @property
    def mean_recall(self) -> float | None:
        return self._mean("recall")

    @property
    def mean_count(self) -> float | None:
        return self._mean("count")

    @property
    def mean_pre_count(self) -> float | None:
        return self._mean("pre_count")

    def per_theme(self) -> dict[str, dict[str, float]]:
        themes: dict[str, list[dict[str, Any]]] = {}
        for r in self.completed:
            if r.get("theme"):
                themes.setdefault(r["theme"], []).append(r)
        return {t: {"recall": self._mean("recall", rs), "count": self._mean("count", rs), "n": len(rs)}
                for t, rs in sorted(themes.items())}

    def summary(self) -> str:
        """``recall / No.`` as in a results table."""
        if self.mean_recall is None:
            return "n/a"
        return f"{self.mean_recall:.2f} / {self.mean_count:.0f}"

    def to_record(self) -> dict[str, Any]:
        rec = {
            "method": self.method,
            "judge": self.judge,
            "config_hash": self.config_hash,
            "params": self.params,
            "aggregates": {
                "mean_recall": self.mean_recall,
                "mean_count": self.mean_count,
                "mean_pre_count": self.mean_pre_count,
                "n": len(self.completed),
                "failures": self.failures,
                "summary": self.summary(),
            },
            "rows": self.rows,
        }
        themes = self.per_theme()
        if themes:
            rec["per_theme"] = themes
        return rec


@dataclass
class Dependencies:
    graph: KnowledgeGraph | None
    gateway: LLMGateway
    linker: LinkerConfig = field(default_factory=LinkerConfig)


def method_config(method: str, config: PipelineConfig, k: int | None = None, t: int | None = None) -> PipelineConfig:
    spec = METHODS[resolve_method(method)]
    updates: dict[str, Any] = {"mode": spec.mode}
    if k is not None:
        updates["zero_shot_k"] = k
    if spec.pool_strategy is None:
        updates["t"] = 0
    elif t is not None:
        updates["t"] = t
    return replace(config, **updates)


def run_instance(inst: BenchmarkInstance, method: str, deps: Dependencies, judge: Judge, config: PipelineConfig,
                 icl: Sequence[Any] = (), jobs: int = 1) -> dict[str, Any]:
    spec = METHODS[resolve_method(method)]
    examples = [e for e in icl if getattr(e, "instance_id", None) != inst.instance_id]
    trace = RunTrace()
    result = run_pipeline(inst.conversation, deps.graph, deps.gateway, deps.linker, examples, config,
                          jobs=jobs, trace=trace)
    questions = result.questions
    pre_count = len(questions)
    if spec.consolidate:
        questions = consolidate(questions, deps.gateway, config.budget, config.kmeans_seed,
                                config.consolidation, jobs).questions
    verdicts, jflags = judge.judge(questions.texts(), [t for t, _ in inst.truth])
    row = {
        "instance_id": inst.instance_id,
        "recall": weighted_recall(verdicts, inst.truth),
        "count": len(questions),
        "pre_count": pre_count,
        "matched": [v.truth_index for v in verdicts if v.matched],
        "graph_search_calls": trace.graph_search_calls,
        "icl_examples": len(examples[: config.t]),
        "error": None,
    }
    if inst.theme:
        row["theme"] = inst.theme
    if jflags:
        row["judge_flags"] = jflags
    return row


def run_benchmark(method: str, instances: Sequence[BenchmarkInstance], deps: Dependencies, judge: Judge,
                  config: PipelineConfig, pool: ICLPool | None = None, k: int | None = None, t: int | None = None,
                  seed: int | None = None, jobs: int = 1) -> EvalReport:
    """Run ``method`` over ``instances`` and aggregate weighted recall and question counts.

    ICL examples are drawn once per run from ``pool`` (seeded) and shared by every
    instance; an instance never sees itself as an example.
    """
    method = resolve_method(method)
    spec = METHODS[method]
    cfg = method_config(method, config, k, t)
    if seed is not None:
        cfg = replace(cfg, icl_seed=seed, kmeans_seed=seed)
    icl: list[Any] = []
    if spec.pool_strategy is not None:
        if pool is None:
            raise ValueError(f"method {method!r} needs an ICL pool")
        icl = select_examples(pool, cfg.t, cfg.icl_seed)

    # parallelism goes to instances when there are several, else inside the pipeline
    inner_jobs = jobs if len(instances) == 1 else 1

    def one(inst: BenchmarkInstance) -> dict[str, Any]:
        try:
            return run_instance(inst, method, deps, judge, cfg, icl, jobs=inner_jobs)
        except Exception as exc:  # recorded per instance, never dropped silently
            logger.exception("instance %s failed", inst.instance_id)
            return {"instance_id": inst.instance_id, "error": f"{type(exc).__name__}: {exc}"}

    rows = pmap(one, list(instances), jobs)
    params = {"k": cfg.zero_shot_k if spec.mode == "zero-shot-k" else None,
              "t": cfg.t if spec.pool_strategy else 0, "seed": cfg.icl_seed, "budget": cfg.budget,
              "pool_strategy": pool.strategy if (pool is not None and spec.pool_strategy) else None}
    return EvalReport(method, judge.name, cfg.hash(), rows, params)


def sweep_grid(spec: Mapping[str, Any]) -> list[dict[str, Any]]:
    """Cartesian product of ``method``/``k``/``t``/``seed`` lists (scalars allowed)."""
    keys = ("method", "k", "t", "seed")
    axes = []
    for key in keys:
        vals = spec.get(key, spec.get(key + "s", [None]))
        axes.append(vals if isinstance(vals, (list, tuple)) else [vals])
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]
