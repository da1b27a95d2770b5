"""Long-term memory: history partitioned into slots, each encoded by the
provider into explicit (topic -> interests) and implicit (attribute ->
value) entries, plus query-time profile retrieval over those entries."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .cognition.parsing import (
    ExplicitEntry,
    ImplicitEntry,
    clean_line,
    parse_attributes,
    parse_topics,
)
from .cognition.prompts import PromptTemplate, default_templates
from .cognition.providers import Provider, ProviderError
from .logmodel import Interaction, Session
from .ranking import pool_scores
from .text import estimate_tokens, truncate_to_budget

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 50
DEFAULT_WINDOW_SECONDS = 7 * 86400
DEFAULT_TOP_K = 5
KINDS = ("explicit", "implicit")
_NOTHING = frozenset({"none", "n/a", "na", "nothing", "no relevant information", "(none)"})

__all__ = [
    "ExplicitEntry", "ImplicitEntry", "LongTermFormatError", "LongTermStore", "MemorySlot",
    "RetrievedProfile", "append_session", "encode_slot", "encode_store", "load",
    "partition_windows", "persist", "render_interactions", "retrieve_profile",
]


class LongTermFormatError(ValueError):
    pass


@dataclass
class MemorySlot:
    index: int
    start_ts: int
    end_ts: int
    interactions: list[Interaction] = field(default_factory=list)
    explicit: list[ExplicitEntry] = field(default_factory=list)
    implicit: list[ImplicitEntry] = field(default_factory=list)
    raw_summary: str = ""
    raw_implicit: str = ""
    encoded: bool = False
    error: str | None = None

    def entries(self, kind: str) -> list[ExplicitEntry] | list[ImplicitEntry]:
        return self.explicit if kind == "explicit" else self.implicit

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "start_ts": self.start_ts,
            "end_ts": self.end_ts,
            "explicit": [e.to_dict() for e in self.explicit],
            "implicit": [e.to_dict() for e in self.implicit],
            "raw_summary": self.raw_summary,
            "raw_implicit": self.raw_implicit,
            "encoded": self.encoded,
            "error": self.error,
            "interactions": [
                {"query": i.query, "timestamp": i.timestamp, "session_id": i.session_id,
                 "clicked": list(i.clicked), "skipped": list(i.skipped)}
                for i in self.interactions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MemorySlot:
        return cls(
            index=int(d["index"]),
            start_ts=int(d["start_ts"]),
            end_ts=int(d["end_ts"]),
            interactions=[
                Interaction(i["query"], int(i["timestamp"]), i.get("session_id", ""),
                            tuple(i.get("clicked", ())), tuple(i.get("skipped", ())))
                for i in d.get("interactions", [])
            ],
            explicit=[ExplicitEntry(e["topic"], tuple(e["interests"])) for e in d.get("explicit", [])],
            implicit=[ImplicitEntry(e["attribute"], e["value"]) for e in d.get("implicit", [])],
            raw_summary=d.get("raw_summary", ""),
            raw_implicit=d.get("raw_implicit", ""),
            encoded=bool(d.get("encoded", False)),
            error=d.get("error"),
        )


@dataclass
class LongTermStore:
    user_id: str = ""
    window_size: int = DEFAULT_WINDOW
    slots: list[MemorySlot] = field(default_factory=list)
    window_mode: str = "count"
    window_seconds: int = DEFAULT_WINDOW_SECONDS

    @property
    def n_entries(self) -> int:
        return sum(len(s.explicit) + len(s.implicit) for s in self.slots)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "window_size": self.window_size,
            "window_mode": self.window_mode,
            "window_seconds": self.window_seconds,
            "slots": [s.to_dict() for s in self.slots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> LongTermStore:
        return cls(
            user_id=d.get("user_id", ""),
            window_size=int(d.get("window_size", DEFAULT_WINDOW)),
            slots=[MemorySlot.from_dict(s) for s in d.get("slots", [])],
            window_mode=d.get("window_mode", "count"),
            window_seconds=int(d.get("window_seconds", DEFAULT_WINDOW_SECONDS)),
        )


def persist(store: LongTermStore, path: str | Path) -> None:
    Path(path).write_text(json.dumps(store.to_dict(), ensure_ascii=False, sort_keys=True),
                          encoding="utf-8")


def load(path: str | Path) -> LongTermStore:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return LongTermStore.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise LongTermFormatError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno} (char {exc.pos})"
        ) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise LongTermFormatError(f"{path}: bad memory store ({exc})") from exc


# -- partitioning -----------------------------------------------------------


def _slot(index: int, items: Sequence[Interaction]) -> MemorySlot:
    return MemorySlot(index, items[0].timestamp, items[-1].timestamp, list(items))


def partition_windows(
    interactions: Iterable[Interaction],
    window_size: int = DEFAULT_WINDOW,
    mode: str = "count",
    window_seconds: int = DEFAULT_WINDOW_SECONDS,
) -> list[MemorySlot]:
    """Chunk time-ordered interactions into unencoded slots.

    ``count`` mode makes slots of ``window_size`` interactions (the last may
    be smaller); ``time`` mode groups by fixed wall-clock windows from the
    first timestamp, skipping empty windows.
    """
    items = list(interactions)
    if not items:
        return []
    if mode == "count":
        if window_size < 1:
            raise ValueError("window_size must be >= 1")
        return [_slot(i, items[s:s + window_size])
                for i, s in enumerate(range(0, len(items), window_size))]
    if mode == "time":
        if window_seconds < 1:
            raise ValueError("window_seconds must be >= 1")
        t0 = items[0].timestamp
        groups: dict[int, list[Interaction]] = {}
        for it in items:
            groups.setdefault((it.timestamp - t0) // window_seconds, []).append(it)
        return [_slot(i, groups[w]) for i, w in enumerate(sorted(groups))]
    raise ValueError(f"unknown window mode {mode!r}")


# -- encoding ---------------------------------------------------------------


def render_interactions(interactions: Iterable[Interaction],
                        titles: Mapping[str, str] | None = None) -> list[str]:
    """One ``query: clicked titles`` line per interaction, followed by a
    ``skipped: titles`` line when results were skipped."""
    titles = titles or {}
    lines = []
    for it in interactions:
        clicked = ", ".join(titles.get(d) or d for d in it.clicked)
        lines.append(f"{it.query}: {clicked}".rstrip())
        if it.skipped:
            lines.append("skipped: " + ", ".join(titles.get(d) or d for d in it.skipped))
    return lines


def _pack_lines(lines: Sequence[str], room: int) -> list[str]:
    """Greedily join lines into blocks whose estimate fits ``room``."""
    blocks: list[str] = []
    cur: list[str] = []
    cur_tokens = 0
    for line in lines:
        t = estimate_tokens(line) + 1
        if t > room:
            line = truncate_to_budget(line, room - 1)
            t = estimate_tokens(line) + 1
        if cur and cur_tokens + t > room:
            blocks.append("\n".join(cur))
            cur, cur_tokens = [], 0
        cur.append(line)
        cur_tokens += t
    if cur:
        blocks.append("\n".join(cur))
    return blocks


def _complete_blocks(provider: Provider, template: PromptTemplate, field_name: str,
                     lines: Sequence[str], **fixed: str) -> str:
    """Send ``lines`` through ``template`` in as few budget-sized calls as
    possible and join the replies."""
    room = provider.config.input_budget - template.overhead(**fixed)
    if room <= 1:
        raise ProviderError("template alone exceeds the input budget")
    replies = []
    for block in _pack_lines(lines, room):
        replies.append(provider.complete(template.render(**{field_name: block}, **fixed)).strip())
    return "\n".join(r for r in replies if r)


def encode_slot(
    slot: MemorySlot,
    provider: Provider,
    kind: str,
    titles: Mapping[str, str] | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> list[ExplicitEntry] | list[ImplicitEntry]:
    """Summarize the slot's interactions into entries of one kind.

    A provider failure leaves the slot flagged unencoded with the error
    recorded; an unparseable reply yields no entries but keeps the raw text.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if not slot.interactions:
        raise ValueError("cannot encode an empty slot")
    templates = templates or default_templates()
    template = templates[f"summarize_{kind}"]
    lines = render_interactions(slot.interactions, titles)
    demos = "\n---\n".join(template.demonstrations)
    try:
        reply = _complete_blocks(provider, template, "interactions", lines, demonstrations=demos)
    except ProviderError as exc:
        slot.encoded = False
        slot.error = f"{kind}: {exc}"
        log.warning("slot %d %s encoding failed: %s", slot.index, kind, exc)
        return []
    if kind == "explicit":
        slot.raw_summary = reply
        slot.explicit = parse_topics(reply)
        return slot.explicit
    slot.raw_implicit = reply
    slot.implicit = parse_attributes(reply)
    return slot.implicit


def _encode_both(slot: MemorySlot, provider: Provider, titles, templates) -> None:
    slot.error = None
    for kind in KINDS:
        encode_slot(slot, provider, kind, titles, templates)
    slot.encoded = slot.error is None


def encode_store(
    user_id: str,
    interactions: Iterable[Interaction],
    provider: Provider,
    window_size: int = DEFAULT_WINDOW,
    titles: Mapping[str, str] | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
    mode: str = "count",
    window_seconds: int = DEFAULT_WINDOW_SECONDS,
    jobs: int = 1,
) -> LongTermStore:
    """Partition and encode a long-term history (offline step)."""
    slots = partition_windows(interactions, window_size, mode, window_seconds)
    if jobs > 1 and len(slots) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda s: _encode_both(s, provider, titles, templates), slots))
    else:
        for s in slots:
            _encode_both(s, provider, titles, templates)
    return LongTermStore(user_id, window_size, slots, mode, window_seconds)


def append_session(
    store: LongTermStore,
    session: Session,
    provider: Provider,
    titles: Mapping[str, str] | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> list[int]:
    """Grow the store with a finished session; returns re-encoded slot indices.

    Interactions first top up the last slot, then open new ones.
    """
    items = list(session.interactions)
    if not items:
        return []
    if store.slots and items[0].timestamp < store.slots[-1].end_ts:
        raise ValueError("session predates the stored history")
    touched: list[MemorySlot] = []
    if store.window_mode == "time":
        origin = store.slots[0].start_ts if store.slots else items[0].timestamp
        last_window = None
        if store.slots:
            last_window = (store.slots[-1].start_ts - origin) // store.window_seconds
        for it in items:
            w = (it.timestamp - origin) // store.window_seconds
            if store.slots and w == last_window:
                slot = store.slots[-1]
            else:
                slot = MemorySlot(len(store.slots), it.timestamp, it.timestamp)
                store.slots.append(slot)
                last_window = w
            slot.interactions.append(it)
            slot.end_ts = it.timestamp
            if slot not in touched:
                touched.append(slot)
    else:
        for it in items:
            if not store.slots or len(store.slots[-1].interactions) >= store.window_size:
                store.slots.append(MemorySlot(len(store.slots), it.timestamp, it.timestamp))
            slot = store.slots[-1]
            slot.interactions.append(it)
            slot.end_ts = it.timestamp
            if slot not in touched:
                touched.append(slot)
    for slot in touched:
        _encode_both(slot, provider, titles, templates)
    return [s.index for s in touched]


# -- retrieval --------------------------------------------------------------


@dataclass
class RetrievedProfile:
    interests: list[str] = field(default_factory=list)
    background: list[str] = field(default_factory=list)
    fallback: bool = False

    @property
    def empty(self) -> bool:
        return not self.interests and not self.background


def _dedupe(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for it in items:
        seen.setdefault(it, None)
    return list(seen)


def _lexical(store: LongTermStore, query: str, kind: str, top_k: int) -> list[str]:
    texts = _dedupe(e.text for s in store.slots for e in s.entries(kind))
    if not texts:
        return []
    scores = pool_scores(query, texts)
    ranked = sorted((i for i in range(len(texts)) if scores[i] > 0),
                    key=lambda i: (-scores[i], i))[:top_k]
    return [texts[i] for i in sorted(ranked)]


_KIND_WORDING = {
    "explicit": ("Explicit memory slot", "interests"),
    "implicit": ("Implicit memory slot", "backgrounds"),
}


def _reply_items(reply: str) -> list[str]:
    out = []
    for raw in reply.splitlines():
        line = clean_line(raw)
        if line and line.casefold().rstrip(".") not in _NOTHING:
            out.append(line)
    return out


def retrieve_profile(
    store: LongTermStore,
    query: str,
    provider: Provider | None = None,
    mode: str = "llm",
    kinds: Sequence[str] = KINDS,
    top_k: int = DEFAULT_TOP_K,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> RetrievedProfile:
    """Pull query-related interests and background from long-term memory.

    ``llm`` mode asks the provider once per slot and kind; ``lexical`` mode
    keeps the top-k entries per kind by BM25 against the query. If every
    provider call fails, lexical mode takes over.
    """
    if not query.strip():
        raise ValueError("query must be nonempty")
    result = RetrievedProfile()
    if mode not in ("llm", "lexical"):
        raise ValueError(f"unknown retrieval mode {mode!r}")
    if mode == "llm" and provider is None:
        raise ValueError("llm retrieval needs a provider")

    if mode == "llm":
        template = (templates or default_templates())["retrieve"]
        calls = failures = 0
        collected: dict[str, list[str]] = {k: [] for k in kinds}
        for slot in store.slots:
            for kind in kinds:
                entries = slot.entries(kind)
                if not entries:
                    continue
                label, noun = _KIND_WORDING[kind]
                calls += 1
                try:
                    reply = _complete_blocks(provider, template, "memory",
                                             [e.text for e in entries],
                                             memory_label=label, kind_noun=noun, query=query)
                except ProviderError as exc:
                    failures += 1
                    log.warning("retrieval over slot %d (%s) failed: %s", slot.index, kind, exc)
                    continue
                collected[kind].extend(_reply_items(reply))
        if calls == 0 or failures < calls:
            result.interests = _dedupe(collected.get("explicit", []))
            result.background = _dedupe(collected.get("implicit", []))
            return result
        log.warning("all retrieval calls failed; falling back to lexical retrieval")
        result.fallback = True

    if "explicit" in kinds:
        result.interests = _lexical(store, query, "explicit", top_k)
    if "implicit" in kinds:
        result.background = _lexical(store, query, "implicit", top_k)
    return result
