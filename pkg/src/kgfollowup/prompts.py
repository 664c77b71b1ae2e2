"""Prompt templates shipped in ``kgfollowup/prompts``.

Each template file has a ``[system]`` and a ``[user]`` section and uses
``string.Template`` placeholders (``$conversation``, ``$count`` ...).
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources
from string import Template

PROMPT_VERSION = "1"


@lru_cache(maxsize=None)
def _load(name: str) -> tuple[str, str, str]:
    text = resources.files("kgfollowup").joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    if "[system]" not in text or "[user]" not in text:
        raise ValueError(f"prompt template {name!r} lacks [system]/[user] sections")
    _, rest = text.split("[system]", 1)
    system, user = rest.split("[user]", 1)
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    return system.strip(), user.strip(), digest


def render_prompt(name: str, **values: object) -> tuple[str, str]:
    system, user, _ = _load(name)
    vals = {k: str(v) for k, v in values.items()}
    return Template(system).substitute(vals), Template(user).substitute(vals)


def template_names() -> list[str]:
    root = resources.files("kgfollowup").joinpath("prompts")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def template_hashes() -> dict[str, str]:
    return {name: _load(name)[2] for name in template_names()}
