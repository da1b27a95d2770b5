"""The cognitive unit: completion providers, prompt templates, reply parsers
and the single-call tasks built on them."""

from .parsing import (
    ExplicitEntry,
    ImplicitEntry,
    parse_attributes,
    parse_ranking,
    parse_topics,
    strip_rewrite,
)
from .prompts import FAMILIES, PromptTemplate, TemplateError, default_templates, load_templates
from .providers import (
    CompletionRecord,
    FunctionProvider,
    HttpProvider,
    MockProvider,
    MockRule,
    PromptTooLong,
    Provider,
    ProviderConfig,
    ProviderError,
    ReplayProvider,
    ReplyCache,
    TraceSink,
    TransientProviderError,
    last_section,
)
from .tasks import chunk_summarize, rewrite_query, rewrite_with_status

__all__ = [
    "CompletionRecord", "ExplicitEntry", "FAMILIES", "FunctionProvider", "HttpProvider",
    "ImplicitEntry", "MockProvider", "MockRule", "PromptTemplate", "PromptTooLong", "Provider",
    "ProviderConfig", "ProviderError", "ReplayProvider", "ReplyCache", "TemplateError",
    "TraceSink", "TransientProviderError", "chunk_summarize", "default_templates",
    "last_section", "load_templates", "parse_attributes", "parse_ranking", "parse_topics",
    "rewrite_query", "rewrite_with_status", "strip_rewrite",
]
