"""Sensory memory: (query, clicked doc) click frequencies for re-finding."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .logmodel import Interaction, Session, UserHistory
from .text import normalize_query

NO_MATCH_TEXT = "No re-finding data found"


@dataclass
class SensoryStore:
    user_id: str = ""
    entries: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, interaction: Interaction) -> None:
        if not interaction.clicked:
            return
        counts = self.entries.setdefault(normalize_query(interaction.query), {})
        for doc_id in interaction.clicked:
            counts[doc_id] = counts.get(doc_id, 0) + 1

    def counts(self, query: str) -> dict[str, int]:
        return self.entries.get(normalize_query(query), {})

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "entries": self.entries}

    @classmethod
    def from_dict(cls, data: dict) -> SensoryStore:
        entries = {q: {d: int(c) for d, c in docs.items()} for q, docs in data["entries"].items()}
        return cls(data.get("user_id", ""), entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> SensoryStore:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SensoryResponse:
    matched: bool
    ranking: tuple[str, ...] = ()


def build_sensory(history: UserHistory | Iterable[Interaction], user_id: str = "") -> SensoryStore:
    if isinstance(history, UserHistory):
        user_id = user_id or history.user_id
        history = history.interactions
    store = SensoryStore(user_id)
    for it in history:
        store.add(it)
    return store


def update_sensory(store: SensoryStore, session: Session) -> None:
    for it in session.interactions:
        store.add(it)


def probe(store: SensoryStore, query: str, candidates: Sequence[str]) -> SensoryResponse:
    """Rank candidates by past clicks under the same normalized query.

    No match unless the query was seen and at least one candidate was
    clicked for it. Ties keep candidate order; unclicked candidates trail.
    """
    if not candidates:
        raise ValueError("probe needs at least one candidate")
    counts = store.counts(query)
    if not any(counts.get(d, 0) > 0 for d in candidates):
        return SensoryResponse(False)
    order = sorted(range(len(candidates)), key=lambda i: (-counts.get(candidates[i], 0), i))
    return SensoryResponse(True, tuple(candidates[i] for i in order))
