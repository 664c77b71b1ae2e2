"""Single boundary to language-model and embedding providers.

Every prompt goes through :meth:`LLMGateway.complete`, which hashes the request,
consults the response cache, retries transport failures, parses the output
according to the request role and logs the call in a transcript.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .providers import (
    CompletionProvider,
    Embedder,
    GatewayError,
    TransportError,
)

logger = logging.getLogger(__name__)

ROLES = ("extract", "generate", "rank-entity", "rank-path", "ddx-best", "ddx-worst", "eliminate", "merge", "judge")
GENERATION_ROLES = frozenset({"generate", "eliminate"})

_SCHEMA = {
    "extract": "items",
    "ddx-best": "items",
    "ddx-worst": "items",
    "generate": "questions",
    "eliminate": "questions",
    "merge": "questions",
    "rank-entity": "ranking",
    "rank-path": "ranking",
    "judge": "verdicts",
}

FORMAT_REMINDERS = {
    "items": "Output format: one item per line as a numbered list (\"1. item\"), or NONE.",
    "questions": "Output format: one question per line as a numbered list, each ending with \"?\". No other text.",
    "ranking": "Output format: candidate numbers only, one per line.",
    "verdicts": "Output format: one line per reference question, \"T<n>: G<m>\" or \"T<n>: none\".",
}


def default_temperature(role: str) -> float:
    return 0.7 if role in GENERATION_ROLES else 0.0


@dataclass(frozen=True)
class PromptRequest:
    role: str
    system_text: str
    user_text: str
    icl_examples: tuple[tuple[str, tuple[str, ...]], ...] = ()
    temperature: float | None = None
    max_tokens: int = 1024
    # caller annotations for the transcript; not part of the request identity
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown prompt role {self.role!r}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", default_temperature(self.role))

    def identity(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "system": self.system_text,
            "user": self.user_text,
            "icl": [[c, list(q)] for c, q in self.icl_examples],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def hash(self) -> str:
        canonical = json.dumps(self.identity(), sort_keys=True, ensure_ascii=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Completion:
    raw_text: str
    parsed: Any
    parseable: bool
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class TranscriptEntry:
    role: str
    request_hash: str
    n_icl: int
    cached: bool
    parseable: bool
    meta: dict[str, Any]
    user_text: str


# -- parsers ------------------------------------------------------------------

_LIST_ITEM = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•]|Q\d*[.:])\s+(.*\S)\s*$")
_INT = re.compile(r"\d+")
_VERDICT = re.compile(r"^\s*T?\s*(\d+)\s*[:=\-]+\s*(?:G?\s*(\d+)|(none|no|n/?a|-))\b", re.IGNORECASE)


def parse_questions(raw_text: str, strict: bool = False) -> list[str]:
    """Questions from a numbered or bulleted list.

    Only list items ending in ``?`` are kept. When the text has no list markers at
    all, bare lines ending in ``?`` are accepted instead. ``strict=True`` expects a
    JSON array of strings.
    """
    if strict:
        try:
            data = json.loads(raw_text)
        except json.JSONDecodeError:
            return []
        if not isinstance(data, list):
            return []
        return [s.strip() for s in data if isinstance(s, str) and s.strip()]

    items, bare = [], []
    for line in raw_text.splitlines():
        m = _LIST_ITEM.match(line)
        if m:
            if m.group(1).endswith("?"):
                items.append(m.group(1).strip())
        elif line.strip().endswith("?"):
            bare.append(line.strip())
    return items if items else bare


def parse_items(raw_text: str) -> list[str] | None:
    """Short items (entities, diagnoses) from a list; ``None`` if unparseable.

    An explicit ``NONE`` answer yields an empty list.
    """
    text = raw_text.strip()
    if not text:
        return None
    if text.strip(". ").lower() in {"none", "n/a", "no entities"}:
        return []
    if text.startswith("["):
        try:
            data = json.loads(text)
            return [str(x).strip() for x in data if str(x).strip()]
        except json.JSONDecodeError:
            pass
    items = [m.group(1) for m in map(_LIST_ITEM.match, text.splitlines()) if m]
    if not items:
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if len(lines) == 1 and "," in lines[0]:
            items = lines[0].split(",")
        elif all(len(ln) < 80 for ln in lines):
            items = lines
        else:
            return None
    out = []
    for it in items:
        it = it.strip().rstrip(".;,").strip()
        if it and it not in out:
            out.append(it)
    return out


def parse_ranking(raw_text: str) -> list[int]:
    """1-based candidate numbers in order of first appearance."""
    seen: list[int] = []
    for tok in _INT.findall(raw_text):
        n = int(tok)
        if n not in seen:
            seen.append(n)
    return seen


def parse_verdicts(raw_text: str) -> dict[int, int | None]:
    """Map 1-based reference index -> 1-based generated index (or ``None``)."""
    out: dict[int, int | None] = {}
    for line in raw_text.splitlines():
        m = _VERDICT.match(line)
        if m:
            out.setdefault(int(m.group(1)), int(m.group(2)) if m.group(2) else None)
    return out


def parse_for_role(role: str, raw_text: str) -> tuple[Any, bool]:
    kind = _SCHEMA[role]
    if kind == "questions":
        qs = parse_questions(raw_text)
        return qs, bool(qs)
    if kind == "items":
        items = parse_items(raw_text)
        if items is None:
            return [], False
        # diagnosis roles need at least one diagnosis; extraction may be empty
        return items, bool(items) or role == "extract"
    if kind == "ranking":
        r = parse_ranking(raw_text)
        return r, bool(r)
    v = parse_verdicts(raw_text)
    return v, bool(v)


# -- cache --------------------------------------------------------------------


class ResponseCache:
    """Content-addressed response cache, in memory and optionally on disk."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(provider: str, model: str, request: PromptRequest) -> str:
        return hashlib.sha256(f"{provider}\x00{model}\x00{request.hash()}".encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._mem:
                self.hits += 1
                return self._mem[key]
            if self.directory is not None:
                path = self.directory / key[:2] / f"{key}.txt"
                if path.exists():
                    text = path.read_text(encoding="utf-8")
                    self._mem[key] = text
                    self.hits += 1
                    return text
            self.misses += 1
            return None

    def put(self, key: str, text: str) -> None:
        with self._lock:
            self._mem[key] = text
            if self.directory is not None:
                path = self.directory / key[:2] / f"{key}.txt"
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(text, encoding="utf-8")
                tmp.replace(path)


# -- gateway ------------------------------------------------------------------


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarities; zero vectors score 0 against everything."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a, dtype=np.float64), where=na > 0)
    b = np.divide(b, nb, out=np.zeros_like(b, dtype=np.float64), where=nb > 0)
    return a @ b.T


class LLMGateway:
    def __init__(
        self,
        provider: CompletionProvider,
        embedder: Embedder,
        model: str = "",
        role_models: dict[str, str] | None = None,
        retries: int = 2,
        reparse_attempts: int = 1,
        cache: ResponseCache | None = None,
        max_in_flight: int = 8,
        retry_backoff: float = 0.5,
        max_icl: int | None = None,
    ):
        self.provider = provider
        self.embedder = embedder
        self.model = model
        self.role_models = dict(role_models or {})
        self.retries = retries
        self.reparse_attempts = reparse_attempts
        self.cache = cache
        self.retry_backoff = retry_backoff
        self.max_icl = max_icl
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self._embed_cache: dict[str, np.ndarray] = {}
        self.transcript: list[TranscriptEntry] = []
        self.embed_calls = 0

    def model_for(self, role: str) -> str:
        return self.role_models.get(role, self.model)

    def _call_provider(self, request: PromptRequest) -> tuple[str, dict[str, Any], bool]:
        model = self.model_for(request.role)
        key = ResponseCache.key(self.provider.name, model, request) if self.cache else None
        if key is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit, {"model": model, "cached": True}, True
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with self._slots:
                    text, usage = self.provider.complete_text(request, model)
                break
            except TransportError as exc:
                last = exc
                logger.warning("transport failure (%s), attempt %d/%d", exc, attempt + 1, self.retries + 1)
                if attempt < self.retries and self.retry_backoff:
                    time.sleep(self.retry_backoff * (2 ** attempt))
        else:
            raise GatewayError(f"provider failed after {self.retries + 1} attempts: {last}") from last
        if key is not None:
            self.cache.put(key, text)
        return text, {"model": model, **usage}, False

    def complete(self, request: PromptRequest) -> Completion:
        if self.max_icl is not None and len(request.icl_examples) > self.max_icl:
            raise ValueError(f"{len(request.icl_examples)} ICL examples exceed the configured maximum {self.max_icl}")
        current = request
        for attempt in range(self.reparse_attempts + 1):
            text, meta, cached = self._call_provider(current)
            parsed, ok = parse_for_role(current.role, text)
            with self._lock:
                self.transcript.append(TranscriptEntry(
                    current.role, current.hash(), len(current.icl_examples), cached, ok,
                    dict(current.meta), current.user_text,
                ))
            if ok:
                return Completion(text, parsed, True, meta | {"attempts": attempt + 1})
            reminder = FORMAT_REMINDERS[_SCHEMA[current.role]]
            current = PromptRequest(
                current.role, current.system_text, f"{request.user_text}\n\n{reminder}",
                current.icl_examples, current.temperature, current.max_tokens, dict(current.meta, reformulated=True),
            )
        return Completion(text, parsed, False, meta | {"attempts": self.reparse_attempts + 1})

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """One vector per text; results are memoized by text."""
        if not texts:
            raise ValueError("embed needs at least one text")
        with self._lock:
            missing = [t for t in dict.fromkeys(texts) if t not in self._embed_cache]
        if missing:
            last: Exception | None = None
            for attempt in range(self.retries + 1):
                try:
                    vecs = np.asarray(self.embedder.embed(missing), dtype=np.float64)
                    break
                except Exception as exc:  # provider-specific failures
                    last = exc
            else:
                raise GatewayError(f"embedding failed: {last}") from last
            with self._lock:
                self.embed_calls += 1
                for t, v in zip(missing, vecs):
                    self._embed_cache[t] = v
        with self._lock:
            return np.stack([self._embed_cache[t] for t in texts])

    # transcript helpers

    def calls(self, role: str | None = None) -> list[TranscriptEntry]:
        with self._lock:
            return [e for e in self.transcript if role is None or e.role == role]

    def reset_transcript(self) -> None:
        with self._lock:
            self.transcript.clear()
