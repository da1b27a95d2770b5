"""Prompt templates.

Templates are plain text files with ``{placeholder}`` fields; a family may
also ship ``<family>.demos.txt`` holding few-shot demonstrations separated by
``---`` lines (``#`` lines are comments). Point :func:`load_templates` at a
directory to override any of the packaged files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..text import estimate_tokens

FAMILIES: dict[str, frozenset[str]] = {
    "rewrite": frozenset({"query"}),
    "retrieve": frozenset({"memory_label", "memory", "query", "kind_noun"}),
    "model_user": frozenset({"background", "interests", "recent", "query"}),
    "summarize_explicit": frozenset({"demonstrations", "interactions"}),
    "summarize_implicit": frozenset({"demonstrations", "interactions"}),
    "rank": frozenset({"query", "preferences", "candidates"}),
    "compress": frozenset({"text"}),
}

_FIELD_RE = re.compile(r"\{(\w+)\}")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    family: str
    text: str
    demonstrations: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        required = FAMILIES.get(self.family)
        if required is None:
            raise TemplateError(f"unknown prompt family {self.family!r}")
        missing = required - self.placeholders
        if missing:
            raise TemplateError(f"{self.family} template lacks {sorted(missing)}")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_FIELD_RE.findall(self.text))

    def render(self, **values: str) -> str:
        if "demonstrations" in self.placeholders and "demonstrations" not in values:
            values["demonstrations"] = "\n---\n".join(self.demonstrations)
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"missing values for {sorted(missing)}")
        # single pass, so braces inside values are never re-expanded
        return _FIELD_RE.sub(lambda m: values[m.group(1)], self.text)

    def overhead(self, **values: str) -> int:
        """Token estimate of the prompt with the given fields (others empty)."""
        filled = {k: "" for k in self.placeholders}
        filled.update(values)
        return estimate_tokens(self.render(**filled))


def _parse_demos(text: str) -> tuple[str, ...]:
    lines = [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]
    blocks = "\n".join(lines).split("\n---\n")
    return tuple(b.strip() for b in blocks if b.strip())


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    packaged = resources.files("cops") / "templates"
    override = Path(directory) if directory else None
    out: dict[str, PromptTemplate] = {}
    for family in FAMILIES:
        def read(name: str) -> str | None:
            if override is not None and (override / name).is_file():
                return (override / name).read_text(encoding="utf-8")
            res = packaged / name
            return res.read_text(encoding="utf-8") if res.is_file() else None

        text = read(f"{family}.txt")
        if text is None:
            raise TemplateError(f"no template for {family}")
        demos = read(f"{family}.demos.txt")
        out[family] = PromptTemplate(family, text.rstrip("\n"), _parse_demos(demos) if demos else ())
    return out


_DEFAULT: dict[str, PromptTemplate] | None = None


def default_templates() -> dict[str, PromptTemplate]:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_templates()
    return _DEFAULT
