"""Text helpers shared by every stage: query normalization, tokenization and
the whitespace token-budget heuristic."""

from __future__ import annotations

import re
import unicodedata

_TOKEN_RE = re.compile(r"[^\W_]+")

# Budget estimate is ceil(words * 1.3); kept in integer arithmetic so that
# truncation to a budget can never round past it.
_EST_NUM = 13
_EST_DEN = 10


def normalize_query(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    stripped = "".join(
        ch for ch in text.lower() if not unicodedata.category(ch).startswith("P")
    )
    return " ".join(stripped.split())


def tokenize(text: str, stopwords: frozenset[str] | None = None) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit.

    >>> tokenize("Maybelline New-York!")
    ['maybelline', 'new', 'york']
    """
    terms = _TOKEN_RE.findall(text.lower())
    if stopwords:
        terms = [t for t in terms if t not in stopwords]
    return terms


def estimate_tokens(text: str) -> int:
    n = len(text.split())
    return (n * _EST_NUM + _EST_DEN - 1) // _EST_DEN


def max_words(budget: int) -> int:
    """Largest word count whose estimate fits in ``budget``."""
    return max(0, budget) * _EST_DEN // _EST_NUM


def truncate_to_budget(text: str, budget: int) -> str:
    """Keep the head of ``text`` so that its estimate is at most ``budget``."""
    words = text.split()
    keep = max_words(budget)
    if len(words) <= keep:
        return text
    return " ".join(words[:keep])
