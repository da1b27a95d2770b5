"""Single-call cognitive tasks: query re-writing and budgeted compression."""

from __future__ import annotations

import logging

from ..text import estimate_tokens, max_words, truncate_to_budget
from .parsing import strip_rewrite
from .prompts import PromptTemplate, default_templates
from .providers import Provider, ProviderError

log = logging.getLogger(__name__)

MAX_SUMMARY_PASSES = 3


def rewrite_with_status(provider: Provider, query: str,
                        template: PromptTemplate | None = None) -> tuple[str, bool]:
    """Like :func:`rewrite_query`, also reporting whether the provider failed."""
    if not query.strip():
        raise ValueError("query must be nonempty")
    template = template or default_templates()["rewrite"]
    budget = provider.config.input_budget - template.overhead()
    prompt = template.render(query=truncate_to_budget(query, budget))
    try:
        reply = provider.complete(prompt)
    except ProviderError as exc:
        log.info("query rewrite failed, keeping original: %s", exc)
        return query, True
    return strip_rewrite(reply) or query, False


def rewrite_query(provider: Provider, query: str, template: PromptTemplate | None = None) -> str:
    """Ask the provider for a clearer query; the original survives any failure."""
    return rewrite_with_status(provider, query, template)[0]


def _chunks(words: list[str], size: int) -> list[str]:
    step = max(1, max_words(size))
    return [" ".join(words[i:i + step]) for i in range(0, len(words), step)]


def chunk_summarize(
    provider: Provider, text: str, budget: int, template: PromptTemplate | None = None
) -> str:
    """Compress ``text`` until its token estimate is at most ``budget``.

    Over-budget text is split into chunks no larger than the budget (and no
    larger than fits the provider's input budget), each chunk summarized,
    and the concatenation re-checked. After three passes, or on any provider
    error, the head of the text is kept instead.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if estimate_tokens(text) <= budget:
        return text
    template = template or default_templates()["compress"]
    room = provider.config.input_budget - template.overhead()
    chunk_size = min(budget, room)
    current = text
    for _ in range(MAX_SUMMARY_PASSES):
        if chunk_size <= 0:
            break
        try:
            parts = [
                provider.complete(template.render(text=chunk)).strip()
                for chunk in _chunks(current.split(), chunk_size)
            ]
        except ProviderError as exc:
            log.info("summarization failed, truncating: %s", exc)
            return truncate_to_budget(current, budget)
        current = "\n".join(p for p in parts if p)
        if estimate_tokens(current) <= budget:
            return current
    return truncate_to_budget(current, budget)
