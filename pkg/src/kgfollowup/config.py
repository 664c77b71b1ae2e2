"""Run configuration: a declarative YAML/JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Sequence

import yaml

from .gateway import LLMGateway, ResponseCache
from .linker import LinkerConfig
from .pipeline import PipelineConfig
from .providers import (
    GatewayError,
    HashingEmbedder,
    HTTPProvider,
    RecordingProvider,
    ScriptedProvider,
    SentenceTransformerEmbedder,
)

CACHE_ENV = "KGF_CACHE_DIR"

DEFAULTS: dict[str, Any] = {
    "pipeline": {},
    "linker": {},
    "provider": {
        "kind": "scripted",
        "script_dir": None,
        "endpoint": "https://api.anthropic.com/v1/messages",
        "model": "",
        "role_models": {},
        "retries": 2,
        "reparse_attempts": 1,
        "retry_backoff": 0.5,
        "cache": False,
        "cache_dir": None,
        "max_in_flight": 8,
        "record": False,
    },
    "embedder": {"kind": "hashing", "dim": 1024, "char_ngrams": 0, "model": "abhinand/MedEmbed-large-v0.1"},
    "judge": {"kind": "embedding", "threshold": 0.85},
    "kg_format": "primekg",
    "benchmark_dialect": "weighted",
}

# execution knobs that must not change outputs
_UNHASHED = {("provider", "record"), ("provider", "cache"), ("provider", "cache_dir"), ("provider", "max_in_flight")}


class ConfigError(ValueError):
    pass


def _merge(base: dict[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(expr: str) -> tuple[list[str], Any]:
    if "=" not in expr:
        raise ConfigError(f"override must look like section.key=value: {expr!r}")
    key, raw = expr.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    data = copy.deepcopy(data)
    for expr in overrides:
        path, value = parse_override(expr)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override below a scalar: {expr!r}")
        node[path[-1]] = value
    return data


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    linker: LinkerConfig
    provider: dict[str, Any]
    embedder: dict[str, Any]
    judge: dict[str, Any]
    kg_format: str = "primekg"
    benchmark_dialect: str = "weighted"
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        merged = _merge(DEFAULTS, data)
        unknown = set(merged) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        pfields = {f.name for f in fields(PipelineConfig)}
        bad = set(merged["pipeline"]) - pfields
        if bad:
            raise ConfigError(f"unknown pipeline keys: {sorted(bad)}")
        lfields = {f.name for f in fields(LinkerConfig)}
        bad = set(merged["linker"]) - lfields
        if bad:
            raise ConfigError(f"unknown linker keys: {sorted(bad)}")
        try:
            pipeline = PipelineConfig(**merged["pipeline"])
            linker = LinkerConfig(**merged["linker"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        merged["pipeline"] = pipeline.to_dict()
        merged["linker"] = dict(vars(linker))
        return cls(pipeline, linker, merged["provider"], merged["embedder"], merged["judge"],
                   merged["kg_format"], merged["benchmark_dialect"], merged)

    @classmethod
    def load(cls, path: str | None = None, overrides: Sequence[str] = ()) -> "RunConfig":
        data: dict[str, Any] = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_overrides(data, overrides))

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.raw)

    def hash(self) -> str:
        d = self.to_dict()
        for section, key in _UNHASHED:
            d.get(section, {}).pop(key, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_embedder(cfg: Mapping[str, Any]):
    kind = cfg.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(dim=int(cfg.get("dim", 1024)), char_ngrams=int(cfg.get("char_ngrams", 0)))
    if kind in ("sentence-transformers", "st"):
        return SentenceTransformerEmbedder(cfg.get("model", "abhinand/MedEmbed-large-v0.1"))
    raise ConfigError(f"unknown embedder kind {kind!r}")


def build_gateway(config: RunConfig, script_dir: str | None = None, record: bool | None = None) -> LLMGateway:
    """Construct the gateway; raises :class:`GatewayError` on provider misconfiguration."""
    p = config.provider
    kind = p.get("kind", "scripted")
    script_dir = script_dir or p.get("script_dir")
    record = p.get("record", False) if record is None else record
    if kind == "scripted":
        if not script_dir:
            raise GatewayError("scripted provider needs provider.script_dir (or --script-dir)")
        provider = ScriptedProvider(script_dir)
    elif kind == "http":
        provider = HTTPProvider(p.get("endpoint", ""))
        if record:
            if not script_dir:
                raise GatewayError("recording needs a script directory")
            provider = RecordingProvider(provider, script_dir)
    else:
        raise GatewayError(f"unknown provider kind {kind!r}")
    cache = None
    if p.get("cache"):
        cache = ResponseCache(p.get("cache_dir") or os.environ.get(CACHE_ENV))
    return LLMGateway(
        provider,
        build_embedder(config.embedder),
        model=p.get("model", ""),
        role_models=p.get("role_models") or {},
        retries=int(p.get("retries", 2)),
        reparse_attempts=int(p.get("reparse_attempts", 1)),
        cache=cache,
        max_in_flight=int(p.get("max_in_flight", 8)),
        retry_backoff=float(p.get("retry_backoff", 0.5)),
        max_icl=config.pipeline.t,
    )
