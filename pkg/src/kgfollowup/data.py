"""Shared records: conversations, follow-up questions and benchmark instances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

CHANNELS = ("pre", "ehr-kg", "ddx", "ddx-kg")

_SPEAKERS = {
    "patient": "patient",
    "user": "patient",
    "human": "patient",
    "doctor": "doctor",
    "assistant": "doctor",
    "clinician": "doctor",
    "physician": "doctor",
}


class RecordError(ValueError):
    """Invalid input record; carries the record id when known."""

    def __init__(self, message: str, record_id: str | None = None, line: int | None = None):
        self.record_id = record_id
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record_id is not None:
            where.append(f"id {record_id}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class Conversation:
    turns: tuple[tuple[str, str], ...]
    instance_id: str = ""

    def __post_init__(self):
        if not any(s == "patient" for s, _ in self.turns):
            raise RecordError("conversation needs at least one patient turn", self.instance_id or None)

    @classmethod
    def from_obj(cls, obj: Any, instance_id: str = "") -> "Conversation":
        """Accept a bare string, a list of turns, or ``{"turns": [...]}``."""
        if isinstance(obj, str):
            return cls((("patient", obj.strip()),), instance_id)
        if isinstance(obj, dict):
            instance_id = str(obj.get("instance_id", instance_id))
            obj = obj.get("turns", obj.get("conversation"))
            return cls.from_obj(obj, instance_id)
        if not isinstance(obj, list):
            raise RecordError("unrecognized conversation format", instance_id or None)
        turns = []
        for t in obj:
            speaker = str(t.get("speaker", t.get("role", ""))).lower()
            if speaker not in _SPEAKERS:
                raise RecordError(f"unknown speaker {speaker!r}", instance_id or None)
            turns.append((_SPEAKERS[speaker], str(t.get("text", t.get("content", ""))).strip()))
        return cls(tuple(turns), instance_id)

    def render(self) -> str:
        return "\n".join(f"{s.capitalize()}: {text}" for s, text in self.turns)

    def to_obj(self) -> dict[str, Any]:
        return {"instance_id": self.instance_id, "turns": [{"speaker": s, "text": t} for s, t in self.turns]}


@dataclass(frozen=True)
class FollowupQuestion:
    text: str
    channel: str
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("question text must be non-empty")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")

    def to_obj(self) -> dict[str, Any]:
        return {"text": self.text, "channel": self.channel, "provenance": list(self.provenance)}


@dataclass
class QuestionSet:
    questions: list[FollowupQuestion] = field(default_factory=list)
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self) -> Iterator[FollowupQuestion]:
        return iter(self.questions)

    def texts(self) -> list[str]:
        return [q.text for q in self.questions]

    def by_channel(self, channel: str) -> list[FollowupQuestion]:
        return [q for q in self.questions if q.channel == channel]

    def counts(self) -> dict[str, int]:
        return {c: len(self.by_channel(c)) for c in CHANNELS}


@dataclass(frozen=True)
class BenchmarkInstance:
    instance_id: str
    conversation: Conversation
    truth: tuple[tuple[str, float], ...]
    theme: str | None = None
    split: str | None = None

    def __post_init__(self):
        if not self.truth:
            raise RecordError("missing ground-truth questions", self.instance_id)
        for text, w in self.truth:
            if not (w > 0):
                raise RecordError(f"non-positive weight {w!r} for {text!r}", self.instance_id)


def read_jsonl(lines: Iterable[str]) -> Iterator[tuple[int, dict[str, Any]]]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(f"invalid JSON: {exc.msg}", line=lineno) from exc


def dump_jsonl_record(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
