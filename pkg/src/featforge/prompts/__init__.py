"""Versioned prompt-template assets.

Templates are plain text files with string.Template placeholders. Version
identifiers are recorded in run manifests so a trial log always names the
exact template text that produced it.
"""

from __future__ import annotations

import string
from importlib import resources

TEMPLATE_VERSIONS = {
    "propose": "propose_v1",
    "extract": "extract_v1",
    "interpret": "interpret_v1",
    "feedback": "feedback_v1",
    "reflect": "reflect_v1",
    "reflect_scalar": "reflect_scalar_v1",
}

SYSTEM_PROMPTS = {
    "propose": "You design feature schemas for a text classification dataset.",
    "extract": "You extract feature values from a text. Answer with JSON only.",
    "interpret": "You audit feature definitions for interpretability.",
    "feedback": "You summarize classifier diagnostics for a prompt engineer.",
    "reflect": "You revise the instruction given to a feature-designing assistant.",
    "reflect_scalar": "You revise the instruction given to a feature-designing assistant.",
}

_cache: dict[str, string.Template] = {}


def template(name: str) -> string.Template:
    if name not in _cache:
        filename = TEMPLATE_VERSIONS[name] + ".txt"
        text = resources.files(__package__).joinpath(filename).read_text(encoding="utf-8")
        _cache[name] = string.Template(text)
    return _cache[name]


def render(name: str, **fields: str) -> str:
    return template(name).substitute(**fields)


def template_versions() -> dict[str, str]:
    return dict(TEMPLATE_VERSIONS)
