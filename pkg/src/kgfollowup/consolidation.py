"""Question consolidation: embed, K-means cluster, merge multi-question clusters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import FollowupQuestion, QuestionSet
from .gateway import LLMGateway, PromptRequest
from .pipeline import pmap
from .prompts import render_prompt

logger = logging.getLogger(__name__)

MAX_ITER = 100


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective_history: list[float]
    n_iter: int

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _objective(x: np.ndarray, c: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - c[labels]) ** 2).sum())


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[centers].copy()


def kmeans(vectors: np.ndarray | list, k: int, seed: int = 0, max_iter: int = MAX_ITER) -> KMeansResult:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops once assignments stop changing or after ``max_iter`` rounds. With no more
    points than clusters every point gets its own cluster. A cluster that empties
    out is re-seeded with the point farthest from its current centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("kmeans expects a non-empty 2-D array")
    if x.shape[1] == 0:
        raise ValueError("kmeans needs vectors with at least one dimension")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(x)
    if n <= k:
        labels = np.arange(n)
        return KMeansResult(labels, x.copy(), [0.0], 0)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = _sq_dists(x, centroids).argmin(1)
    history = [_objective(x, centroids, labels)]
    rows = np.arange(n)
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            counts = np.bincount(labels, minlength=k)
            if counts[j] == 0:
                # donors must keep at least one member
                cost = np.where(counts[labels] > 1, ((x - centroids[labels]) ** 2).sum(1), -1.0)
                labels[int(cost.argmax())] = j
        for j in range(k):
            centroids[j] = x[labels == j].mean(0)
        history.append(_objective(x, centroids, labels))
        d = _sq_dists(x, centroids)
        best = d.argmin(1)
        # move a point only on strict improvement so ties cannot cycle
        new_labels = np.where(d[rows, best] < d[rows, labels], best, labels)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        history.append(_objective(x, centroids, labels))
    return KMeansResult(labels, centroids, history, it)


@dataclass
class QuestionCluster:
    members: list[FollowupQuestion]
    centroid: np.ndarray
    merged: FollowupQuestion | None = None


@dataclass
class ConsolidationResult:
    questions: QuestionSet
    clusters: list[QuestionCluster] = field(default_factory=list)
    flags: dict[str, Any] = field(default_factory=dict)


def _key(text: str) -> str:
    return " ".join(text.split()).casefold()


def _dedupe(questions: list[FollowupQuestion]) -> list[FollowupQuestion]:
    kept: dict[str, FollowupQuestion] = {}
    for q in questions:
        k = _key(q.text)
        if k in kept:
            prev = kept[k]
            prov = tuple(dict.fromkeys(prev.provenance + q.provenance))
            kept[k] = FollowupQuestion(prev.text, prev.channel, prov)
        else:
            kept[k] = q
    return list(kept.values())


def consolidate(questions: QuestionSet, gateway: LLMGateway, budget: int, seed: int = 0,
                strategy: str = "merge", jobs: int = 1) -> ConsolidationResult:
    """Reduce ``questions`` to at most ``budget`` items.

    ``strategy="merge"`` clusters and merges; ``"select"`` asks the LLM to pick
    ``budget`` questions instead; ``"none"`` only removes exact duplicates.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    flags: dict[str, Any] = {"input": len(questions)}
    pool = _dedupe(list(questions))
    flags["after_dedupe"] = len(pool)
    if strategy == "none" or not pool:
        return ConsolidationResult(QuestionSet(pool, questions.config_hash), flags=flags)
    if strategy == "select":
        return _select(pool, questions.config_hash, gateway, budget, flags)
    if strategy != "merge":
        raise ValueError(f"unknown consolidation strategy {strategy!r}")

    k = min(budget, len(pool))
    vecs = gateway.embed([q.text for q in pool])
    km = kmeans(vecs, k, seed)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(km.labels):
        groups.setdefault(int(lab), []).append(i)
    ordered = sorted(groups.values(), key=lambda idx: idx[0])

    def resolve(idx: list[int]) -> tuple[QuestionCluster, bool]:
        members = [pool[i] for i in idx]
        centroid = vecs[idx].mean(0)
        cluster = QuestionCluster(members, centroid)
        if len(members) == 1:
            return cluster, False
        closest = members[int(((vecs[idx] - centroid) ** 2).sum(1).argmin())]
        provenance = tuple(dict.fromkeys(p for m in members for p in m.provenance))
        system, user = render_prompt("merge", questions="\n".join(f"- {m.text}" for m in members))
        comp = gateway.complete(PromptRequest("merge", system, user, meta={"cluster_size": len(members)}))
        text = comp.parsed[0] if comp.parseable else closest.text
        cluster.merged = FollowupQuestion(text, closest.channel, provenance)
        return cluster, not comp.parseable

    resolved = pmap(resolve, ordered, jobs)
    clusters = [c for c, _ in resolved]
    out = [c.merged if c.merged is not None else c.members[0] for c in clusters]
    flags["merge_calls"] = sum(len(c.members) > 1 for c in clusters)
    flags["merge_fallbacks"] = sum(failed for _, failed in resolved)
    flags["output"] = len(out)
    return ConsolidationResult(QuestionSet(out, questions.config_hash), clusters, flags)


def _select(pool: list[FollowupQuestion], config_hash: str, gateway: LLMGateway, budget: int,
            flags: dict[str, Any]) -> ConsolidationResult:
    if len(pool) <= budget:
        return ConsolidationResult(QuestionSet(pool, config_hash), flags=flags)
    system, user = render_prompt("select", questions="\n".join(f"{i}. {q.text}" for i, q in enumerate(pool, 1)),
                                 count=budget)
    comp = gateway.complete(PromptRequest("rank-entity", system, user, meta={"consolidation": "select"}))
    ranked = [r - 1 for r in (comp.parsed if comp.parseable else []) if 1 <= r <= len(pool)]
    ranked = list(dict.fromkeys(ranked)) + [i for i in range(len(pool)) if i not in ranked]
    keep = sorted(ranked[:budget])
    flags["select_fallback"] = not comp.parseable
    return ConsolidationResult(QuestionSet([pool[i] for i in keep], config_hash), flags=flags)
