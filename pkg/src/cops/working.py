"""Working memory: the query-time context (re-written query, recent session
interactions, retrieved profile) and the user-modeling step over it."""

from __future__ import annotations

import logging
from collections.abc import Collection, Mapping, Sequence
from dataclasses import dataclass, field

from .cognition.prompts import PromptTemplate, default_templates
from .cognition.providers import Provider, ProviderError
from .cognition.tasks import chunk_summarize, rewrite_with_status
from .logmodel import Interaction
from .longterm import DEFAULT_TOP_K, LongTermStore, render_interactions, retrieve_profile
from .text import estimate_tokens, truncate_to_budget

log = logging.getLogger(__name__)

DEFAULT_RECENT = 5
TOGGLES = frozenset({"rewrite", "retrieve_explicit", "retrieve_implicit", "recent"})
EMPTY_SECTION = "(none)"


@dataclass
class WorkingContext:
    original_query: str
    rewritten_query: str
    recent: list[Interaction] = field(default_factory=list)
    interests: list[str] = field(default_factory=list)
    background: list[str] = field(default_factory=list)
    degradations: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.rewritten_query.strip():
            self.rewritten_query = self.original_query


@dataclass(frozen=True)
class UserModelText:
    text: str
    degraded: bool = False


def assemble(
    query: str,
    short_term: Sequence[Interaction],
    store: LongTermStore | None,
    provider: Provider | None,
    toggles: Collection[str] = TOGGLES,
    m: int = DEFAULT_RECENT,
    retrieval_mode: str = "llm",
    top_k: int = DEFAULT_TOP_K,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> WorkingContext:
    """Collect what user modeling needs; disabled parts stay empty."""
    unknown = set(toggles) - TOGGLES
    if unknown:
        raise ValueError(f"unknown toggles {sorted(unknown)}")
    templates = templates or default_templates()
    ctx = WorkingContext(query, query)

    if "rewrite" in toggles and provider is not None:
        ctx.rewritten_query, failed = rewrite_with_status(provider, query, templates["rewrite"])
        if failed:
            ctx.degradations.append("rewrite")
    if "recent" in toggles and m > 0:
        ctx.recent = list(short_term)[-m:]

    kinds = [k for k, t in (("explicit", "retrieve_explicit"), ("implicit", "retrieve_implicit"))
             if t in toggles]
    if kinds and store is not None and store.slots:
        mode = retrieval_mode if provider is not None else "lexical"
        profile = retrieve_profile(store, ctx.rewritten_query, provider, mode, kinds, top_k,
                                   templates)
        if profile.fallback:
            ctx.degradations.append("retrieval")
        ctx.interests = profile.interests
        ctx.background = profile.background
    return ctx


def _sections(ctx: WorkingContext, titles: Mapping[str, str] | None) -> dict[str, str]:
    return {
        "background": "\n".join(ctx.background),
        "interests": "\n".join(ctx.interests),
        "recent": "\n".join(render_interactions(ctx.recent, titles)),
    }


def render_user_prompt(
    ctx: WorkingContext,
    provider: Provider | None = None,
    titles: Mapping[str, str] | None = None,
    template: PromptTemplate | None = None,
    budget: int | None = None,
) -> str:
    """Fill the user-modeling prompt, compressing sections that would push
    the estimate past ``budget``."""
    template = template or default_templates()["model_user"]
    if budget is None:
        budget = provider.config.input_budget if provider is not None else 10**9
    query = ctx.rewritten_query
    fixed = template.overhead(background=EMPTY_SECTION, interests=EMPTY_SECTION,
                              recent=EMPTY_SECTION)
    query = truncate_to_budget(query, budget - fixed)
    sections = _sections(ctx, titles)
    room = budget - template.overhead(query=query)
    sizes = {k: estimate_tokens(v) for k, v in sections.items()}
    if sum(sizes.values()) > room:
        total = sum(sizes.values())
        for name, text in sections.items():
            share = max(1, room * sizes[name] // total) if room > 0 else 0
            if sizes[name] <= share:
                continue
            if provider is not None and share > 0:
                sections[name] = chunk_summarize(provider, text, share)
            else:
                sections[name] = truncate_to_budget(text, share)

    def fill() -> str:
        return template.render(query=query, **{k: v or EMPTY_SECTION for k, v in sections.items()})

    prompt = fill()
    # integer rounding in the shares can still overshoot by a token or two
    while estimate_tokens(prompt) > budget and any(sections.values()):
        name = max(sections, key=lambda k: estimate_tokens(sections[k]))
        words = sections[name].split()
        sections[name] = " ".join(words[: len(words) - max(1, len(words) // 10)])
        prompt = fill()
    return prompt


def model_user(
    ctx: WorkingContext,
    provider: Provider | None,
    titles: Mapping[str, str] | None = None,
    template: PromptTemplate | None = None,
) -> UserModelText:
    """Infer the personalized query intent; the re-written query stands in
    when the provider fails or says nothing."""
    if provider is None:
        return UserModelText(ctx.rewritten_query)
    prompt = render_user_prompt(ctx, provider, titles, template)
    try:
        reply = provider.complete(prompt)
    except ProviderError as exc:
        log.info("user modeling failed, using the query: %s", exc)
        return UserModelText(ctx.rewritten_query, degraded=True)
    text = " ".join(reply.split())
    return UserModelText(text or ctx.rewritten_query)
