"""Lenient parsers for provider replies. None of them raise on any input."""

from __future__ import annotations

import re
from dataclasses import dataclass

_BULLET_RE = re.compile(r"^\s*(?:[-*•·]+|\d+[.)])\s*")
_BRACKET_LABEL_RE = re.compile(r"\[(\d+)\]")
_INT_RE = re.compile(r"\d+")
_QUOTES = "\"'`“”‘’"
_PREFIX_RE = re.compile(
    r"^\s*(?:re-?written\s+query|rewritten|re-?written|rewrite|query|output|answer)\s*:\s*",
    re.IGNORECASE,
)

# The slot renderer marks skipped results with this key; echoing it back
# is not an interest.
RESERVED_KEYS = frozenset({"skipped"})


@dataclass(frozen=True)
class ExplicitEntry:
    topic: str
    interests: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.topic or not self.interests:
            raise ValueError("explicit entries need a topic and at least one interest")

    @property
    def text(self) -> str:
        return f"{self.topic}: {', '.join(self.interests)}"

    def to_dict(self) -> dict:
        return {"topic": self.topic, "interests": list(self.interests)}


@dataclass(frozen=True)
class ImplicitEntry:
    attribute: str
    value: str

    def __post_init__(self) -> None:
        if not self.attribute:
            raise ValueError("implicit entries need an attribute")

    @property
    def text(self) -> str:
        return f"{self.attribute}: {self.value}"

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "value": self.value}


def clean_line(line: str) -> str:
    """Strip list bullets and markdown emphasis from a reply line."""
    line = _BULLET_RE.sub("", line)
    return line.replace("**", "").strip()


def _key_value_lines(reply: str):
    for raw in reply.splitlines():
        line = clean_line(raw)
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or not key or key.casefold() in RESERVED_KEYS:
            continue
        yield key, value.strip()


def parse_topics(reply: str) -> list[ExplicitEntry]:
    """One ``topic: item, item`` line per entry; other lines are ignored."""
    out = []
    for key, value in _key_value_lines(reply):
        items = tuple(v.strip() for v in value.split(",") if v.strip())
        if items:
            out.append(ExplicitEntry(key, items))
    return out


def parse_attributes(reply: str) -> list[ImplicitEntry]:
    """One ``attribute: value`` line per entry; the value is kept whole."""
    return [ImplicitEntry(k, v) for k, v in _key_value_lines(reply) if v]


def strip_rewrite(reply: str) -> str:
    """First nonempty line with label prefixes and surrounding quotes removed."""
    for raw in reply.splitlines():
        line = raw.strip()
        if line:
            break
    else:
        return ""
    line = _PREFIX_RE.sub("", line)
    return line.strip().strip(_QUOTES).strip()


def _labels(reply: str) -> list[int]:
    bracketed = _BRACKET_LABEL_RE.findall(reply)
    if bracketed:
        return [int(x) for x in bracketed]
    if ">" in reply:
        out = []
        for part in reply.split(">"):
            m = _INT_RE.search(part)
            if m:
                out.append(int(m.group()))
        return out
    lines = [ln for ln in reply.splitlines() if ln.strip()]
    numbered = [re.match(r"^\s*\d+\s*[.)]\s*(.*)$", ln) for ln in lines]
    if lines and all(numbered):
        out = []
        for m in numbered:
            inner = _INT_RE.search(m.group(1))
            if inner:
                out.append(int(inner.group()))
        if out:
            return out
        # bare numbered list carries no labels beyond its own numbering
    return [int(x) for x in _INT_RE.findall(reply)]


def parse_ranking(reply: str, n: int) -> tuple[list[int], bool]:
    """Turn a listwise reply into a permutation of labels ``1..n``.

    Accepts ``3 > 1 > 2``, ``[3] > [1]`` and numbered lists. Out-of-range
    and repeated labels are dropped; unmentioned labels follow in their
    original order. Returns ``(order, parse_failed)``; on failure the order
    is the identity.
    """
    seen: list[int] = []
    for label in _labels(reply or ""):
        if 1 <= label <= n and label not in seen:
            seen.append(label)
    failed = not seen and n > 0
    rest = [i for i in range(1, n + 1) if i not in seen]
    return seen + rest, failed
