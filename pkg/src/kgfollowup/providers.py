"""Text-completion and embedding providers behind the gateway.

Completion providers implement ``complete_text(request, model) -> (text, usage)``;
embedding providers implement ``embed(texts) -> ndarray``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol, Sequence

import numpy as np

from .kg import normalize_name

if TYPE_CHECKING:
    from .gateway import PromptRequest

logger = logging.getLogger(__name__)

API_KEY_ENV = "KGF_API_KEY"


class GatewayError(RuntimeError):
    """Non-recoverable provider failure."""


class TransportError(GatewayError):
    """Retryable transport failure (network error, 5xx, rate limit)."""


class ScriptMissError(GatewayError):
    """Scripted provider has no response for a request."""


class CompletionProvider(Protocol):
    name: str

    def complete_text(self, request: "PromptRequest", model: str) -> tuple[str, dict[str, Any]]: ...


# -- scripted replay --------------------------------------------------------


@dataclass
class ScriptRule:
    response: str
    role: str | None = None
    contains: tuple[str, ...] = ()

    def matches(self, request: "PromptRequest") -> bool:
        if self.role is not None and self.role != request.role:
            return False
        return all(s in request.user_text for s in self.contains)


def _rule_from_dict(d: dict[str, Any]) -> ScriptRule:
    contains = d.get("contains", ())
    if isinstance(contains, str):
        contains = (contains,)
    return ScriptRule(response=d["response"], role=d.get("role"), contains=tuple(contains))


class ScriptedProvider:
    """Replay provider: canned text keyed by request hash.

    Lookup order is an exact ``<request-hash>.txt`` file (or in-memory entry),
    then the first matching rule from ``rules.json`` / ``rules.yaml``. Rules match
    on role and on substrings of the user prompt, which keeps hand-written
    fixtures readable.
    """

    name = "scripted"

    def __init__(self, directory: str | os.PathLike | None = None, responses: dict[str, str] | None = None,
                 rules: Sequence[ScriptRule | dict[str, Any]] = ()):
        self.directory = Path(directory) if directory else None
        self.responses = dict(responses or {})
        loaded: list[ScriptRule] = []
        if self.directory is not None:
            if not self.directory.is_dir():
                raise GatewayError(f"scripted provider directory not found: {self.directory}")
            for fname in ("rules.json", "rules.yaml", "rules.yml"):
                path = self.directory / fname
                if path.exists():
                    if fname.endswith(".json"):
                        data = json.loads(path.read_text(encoding="utf-8"))
                    else:
                        import yaml

                        data = yaml.safe_load(path.read_text(encoding="utf-8"))
                    loaded.extend(_rule_from_dict(r) for r in data)
        self.rules = [r if isinstance(r, ScriptRule) else _rule_from_dict(r) for r in rules] + loaded

    def complete_text(self, request: "PromptRequest", model: str) -> tuple[str, dict[str, Any]]:
        key = request.hash()
        if key in self.responses:
            return self.responses[key], {"source": "hash"}
        if self.directory is not None:
            path = self.directory / f"{key}.txt"
            if path.exists():
                return path.read_text(encoding="utf-8"), {"source": "hash"}
        for i, rule in enumerate(self.rules):
            if rule.matches(request):
                return rule.response, {"source": f"rule:{i}"}
        raise ScriptMissError(f"no scripted response for role={request.role} hash={key[:12]}")


class RecordingProvider:
    """Wrap a live provider and store each response as ``<request-hash>.txt``."""

    def __init__(self, inner: CompletionProvider, directory: str | os.PathLike):
        self.inner = inner
        self.name = f"recording({inner.name})"
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def complete_text(self, request: "PromptRequest", model: str) -> tuple[str, dict[str, Any]]:
        text, usage = self.inner.complete_text(request, model)
        (self.directory / f"{request.hash()}.txt").write_text(text, encoding="utf-8")
        return text, usage


# -- remote messages-style HTTP provider -------------------------------------


class HTTPProvider:
    """Messages-style chat-completion client.

    ICL examples become alternating user/assistant turns ahead of the final
    user message.
    """

    name = "http"

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 60.0,
                 api_version: str = "2023-06-01", transport: Any = None):
        import httpx

        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise GatewayError(f"remote provider needs an API key in ${API_KEY_ENV}")
        if not endpoint:
            raise GatewayError("remote provider needs an endpoint URL")
        self.endpoint = endpoint
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"x-api-key": key, "anthropic-version": api_version, "content-type": "application/json"},
        )

    @staticmethod
    def build_payload(request: "PromptRequest", model: str) -> dict[str, Any]:
        messages: list[dict[str, str]] = []
        for conv, questions in request.icl_examples:
            messages.append({"role": "user", "content": f"Patient conversation:\n{conv}"})
            messages.append({"role": "assistant",
                             "content": "\n".join(f"{i}. {q}" for i, q in enumerate(questions, 1))})
        messages.append({"role": "user", "content": request.user_text})
        payload: dict[str, Any] = {
            "model": model,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "messages": messages,
        }
        if request.system_text:
            payload["system"] = request.system_text
        return payload

    def complete_text(self, request: "PromptRequest", model: str) -> tuple[str, dict[str, Any]]:
        import httpx

        try:
            resp = self._client.post(self.endpoint, json=self.build_payload(request, model))
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        text = "".join(block.get("text", "") for block in body.get("content", []) if block.get("type") == "text")
        usage = dict(body.get("usage", {}))
        usage["model"] = body.get("model", model)
        return text, usage


# -- embeddings ---------------------------------------------------------------


class Embedder(Protocol):
    name: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass
class HashingEmbedder:
    """Deterministic bag-of-words embedder.

    Normalized tokens are hashed into ``dim`` buckets; word order is irrelevant.
    ``char_ngrams > 0`` adds boundary-padded character n-grams per token, which
    makes near-spellings ("head ache" / "headache") comparable.
    """

    dim: int = 1024
    char_ngrams: int = 0
    name: str = field(default="hashing", init=False)

    def features(self, text: str) -> list[str]:
        feats = []
        for tok in normalize_name(text).split():
            feats.append("w:" + tok)
            if self.char_ngrams > 0:
                padded = f"#{tok}#"
                n = self.char_ngrams
                feats.extend("c:" + padded[i:i + n] for i in range(len(padded) - n + 1))
        return feats

    def _bucket(self, feature: str) -> int:
        return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "big") % self.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            for f in self.features(text):
                out[i, self._bucket(f)] += 1.0
        return out


class SentenceTransformerEmbedder:
    """Embedding provider backed by a sentence-transformers model (e.g. a medical encoder)."""

    def __init__(self, model_name: str = "abhinand/MedEmbed-large-v0.1", device: str | None = None):
        self.name = f"st:{model_name}"
        self.model_name = model_name
        self.device = device
        self._model = None
        self._lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        with self._lock:
            if self._model is None:
                try:
                    from sentence_transformers import SentenceTransformer
                except ImportError as exc:
                    raise GatewayError("sentence-transformers is not installed") from exc
                self._model = SentenceTransformer(self.model_name, device=self.device)
            return np.asarray(self._model.encode(list(texts), convert_to_numpy=True), dtype=np.float64)
