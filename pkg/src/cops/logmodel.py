"""Query-log domain types, TSV ingestion/serialization, session segmentation
and the chronological history/test split."""

from __future__ import annotations

import io
import json
import logging
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, TextIO

log = logging.getLogger(__name__)

SESSION_GAP_SECONDS = 1800
DEFAULT_SPLIT_FRACTION = 0.85
MAX_MALFORMED_RATIO = 0.10
N_COLUMNS = 7


class LogFormatError(ValueError):
    """Fatal problem with a query log or corpus file."""


@dataclass(frozen=True)
class DocumentRef:
    doc_id: str
    title: str = ""
    body: str = ""

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be nonempty")

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}" if self.body else self.title


@dataclass(frozen=True)
class Interaction:
    """One logged search: query, clicked docs (D+) and skipped docs (D-)."""

    query: str
    timestamp: int
    session_id: str = ""
    clicked: tuple[str, ...] = ()
    skipped: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValueError("query must be nonempty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")
        if set(self.clicked) & set(self.skipped):
            raise ValueError("a document cannot be both clicked and skipped")


@dataclass(frozen=True)
class Session:
    session_id: str
    interactions: tuple[Interaction, ...] = ()

    def __post_init__(self) -> None:
        if any(i.session_id != self.session_id for i in self.interactions):
            raise ValueError("all interactions of a session must share its id")
        for prev, cur in zip(self.interactions, self.interactions[1:]):
            if cur.timestamp < prev.timestamp:
                raise ValueError("session interactions must be time-ordered")

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass(frozen=True)
class UserHistory:
    """H = long-term sessions (H^l) plus the current session (H^s)."""

    user_id: str
    long_term: tuple[Session, ...] = ()
    short_term: Session | None = None

    @property
    def long_term_interactions(self) -> list[Interaction]:
        return [i for s in self.long_term for i in s.interactions]

    @property
    def interactions(self) -> list[Interaction]:
        out = self.long_term_interactions
        if self.short_term is not None:
            out.extend(self.short_term.interactions)
        return out

    @property
    def queries(self) -> set[str]:
        return {i.query for i in self.interactions}


@dataclass
class TestQuery:
    user_id: str
    query: str
    timestamp: int
    candidates: list[DocumentRef] = field(default_factory=list)
    relevant: frozenset[str] = frozenset()
    session_id: str = ""
    skipped: tuple[str, ...] = ()

    __test__ = False  # not a pytest class

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.user_id, self.timestamp, self.query)

    @property
    def candidate_ids(self) -> list[str]:
        return [d.doc_id for d in self.candidates]

    def as_interaction(self) -> Interaction:
        clicked = tuple(sorted(self.relevant))
        skipped = tuple(d for d in self.skipped if d not in self.relevant)
        return Interaction(self.query, self.timestamp, self.session_id, clicked, skipped)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "query": self.query,
            "timestamp": self.timestamp,
            "session_id": self.session_id,
            "relevant": sorted(self.relevant),
            "skipped": list(self.skipped),
            "candidates": [
                {"doc_id": d.doc_id, "title": d.title, "body": d.body} for d in self.candidates
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> TestQuery:
        return cls(
            user_id=data["user_id"],
            query=data["query"],
            timestamp=int(data["timestamp"]),
            candidates=[DocumentRef(**c) for c in data.get("candidates", [])],
            relevant=frozenset(data.get("relevant", [])),
            session_id=data.get("session_id", ""),
            skipped=tuple(data.get("skipped", [])),
        )


@dataclass
class ParsedLog:
    histories: list[UserHistory]
    titles: dict[str, str]
    n_lines: int = 0
    malformed: list[int] = field(default_factory=list)

    @property
    def n_interactions(self) -> int:
        return sum(len(h.interactions) for h in self.histories)


# -- segmentation -----------------------------------------------------------


def segment_sessions(
    interactions: Iterable[Interaction], gap: int = SESSION_GAP_SECONDS
) -> list[Session]:
    """Group time-ordered interactions into sessions.

    Contiguous runs sharing a session id form one session. Interactions
    without a session id are split wherever the gap to the previous one
    exceeds ``gap`` seconds.
    """
    sessions: list[Session] = []
    run: list[Interaction] = []
    for it in interactions:
        if run:
            prev = run[-1]
            if it.session_id != prev.session_id or (
                not it.session_id and it.timestamp - prev.timestamp > gap
            ):
                sessions.append(Session(prev.session_id, tuple(run)))
                run = []
        run.append(it)
    if run:
        sessions.append(Session(run[-1].session_id, tuple(run)))
    return sessions


# -- TSV ingestion ----------------------------------------------------------


def _text_stream(stream: TextIO | BinaryIO | str | Path) -> TextIO:
    if isinstance(stream, (str, Path)):
        return open(stream, encoding="utf-8", newline="")
    if isinstance(stream, io.TextIOBase):
        return stream
    try:
        return io.TextIOWrapper(stream, encoding="utf-8", newline="")  # type: ignore[arg-type]
    except (AttributeError, TypeError) as exc:
        raise LogFormatError(f"unreadable log stream: {exc}") from exc


def _parse_line(line: str) -> tuple[str, str, str, int, str, str, int]:
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != N_COLUMNS:
        raise ValueError(f"expected {N_COLUMNS} columns, got {len(cols)}")
    user_id, session_id, query, ts, doc_id, title, tag = cols
    if not user_id or not query.strip() or not doc_id:
        raise ValueError("empty user, query or doc id")
    timestamp = int(ts)
    if timestamp < 0:
        raise ValueError("negative timestamp")
    if tag not in ("0", "1"):
        raise ValueError(f"click tag must be 0 or 1, got {tag!r}")
    return user_id, session_id, query, timestamp, doc_id, title, int(tag)


def parse_log(stream: TextIO | BinaryIO | str | Path) -> ParsedLog:
    """Read a seven-column TSV log into per-user histories.

    Lines sharing (user, session, query, timestamp) form one interaction;
    click tag 1 marks a clicked document and 0 a skipped one. Malformed lines
    are skipped, unless they exceed 10% of the input.
    """
    fh = _text_stream(stream)
    close = isinstance(stream, (str, Path))
    groups: dict[tuple[str, str, str, int], tuple[list[str], list[str]]] = {}
    users: dict[str, None] = {}
    titles: dict[str, str] = {}
    malformed: list[int] = []
    n_lines = 0
    try:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                user_id, session_id, query, ts, doc_id, title, tag = _parse_line(line)
            except ValueError:
                malformed.append(lineno)
                continue
            users.setdefault(user_id, None)
            if title or doc_id not in titles:
                titles[doc_id] = title
            clicked, skipped = groups.setdefault((user_id, session_id, query, ts), ([], []))
            if tag == 1:
                if doc_id in skipped:
                    skipped.remove(doc_id)
                if doc_id not in clicked:
                    clicked.append(doc_id)
            elif doc_id not in clicked and doc_id not in skipped:
                skipped.append(doc_id)
    except (OSError, UnicodeDecodeError) as exc:
        raise LogFormatError(f"unreadable log stream: {exc}") from exc
    finally:
        if close:
            fh.close()

    if n_lines and len(malformed) > MAX_MALFORMED_RATIO * n_lines:
        shown = ", ".join(map(str, malformed[:20]))
        more = "" if len(malformed) <= 20 else f" (+{len(malformed) - 20} more)"
        raise LogFormatError(
            f"{len(malformed)} of {n_lines} lines malformed; lines {shown}{more}"
        )
    if malformed:
        log.warning("skipped %d malformed log lines", len(malformed))

    per_user: dict[str, list[Interaction]] = {u: [] for u in users}
    for (user_id, session_id, query, ts), (clicked, skipped) in groups.items():
        per_user[user_id].append(
            Interaction(query, ts, session_id, tuple(clicked), tuple(skipped))
        )
    histories = []
    for user_id, items in per_user.items():
        # stable: first-appearance order breaks timestamp ties
        items.sort(key=lambda it: it.timestamp)
        histories.append(UserHistory(user_id, tuple(segment_sessions(items))))
    return ParsedLog(histories, titles, n_lines, malformed)


def iter_log_lines(
    histories: Iterable[UserHistory], titles: dict[str, str] | None = None
) -> Iterator[str]:
    titles = titles or {}
    for h in histories:
        for it in h.interactions:
            for doc_id, tag in [(d, 1) for d in it.clicked] + [(d, 0) for d in it.skipped]:
                yield "\t".join(
                    [h.user_id, it.session_id, it.query, str(it.timestamp), doc_id,
                     titles.get(doc_id, ""), str(tag)]
                ) + "\n"


def serialize_log(
    histories: Iterable[UserHistory], stream: TextIO, titles: dict[str, str] | None = None
) -> None:
    """Write histories back in the TSV format read by :func:`parse_log`.

    Interactions without any clicked or skipped document have no line to
    carry them and are dropped.
    """
    for line in iter_log_lines(histories, titles):
        stream.write(line)


# -- corpus -----------------------------------------------------------------


def load_corpus(path: str | Path) -> dict[str, DocumentRef]:
    docs: dict[str, DocumentRef] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = DocumentRef(str(rec["doc_id"]), rec.get("title", ""), rec.get("body", ""))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise LogFormatError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if doc.doc_id in docs:
                raise LogFormatError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            docs[doc.doc_id] = doc
    return docs


def write_corpus(docs: Iterable[DocumentRef], stream: TextIO) -> None:
    for d in docs:
        stream.write(
            json.dumps({"doc_id": d.doc_id, "title": d.title, "body": d.body}, ensure_ascii=False)
            + "\n"
        )


# -- split ------------------------------------------------------------------


def split_point(n: int, fraction: float) -> int:
    """floor(fraction * n), robust to binary rounding (0.85 * 20 == 17)."""
    return math.floor(round(fraction * n, 9))


def _history_from(user_id: str, interactions: Sequence[Interaction], cut_session: bool) -> UserHistory:
    sessions = segment_sessions(interactions)
    if cut_session and sessions:
        return UserHistory(user_id, tuple(sessions[:-1]), sessions[-1])
    return UserHistory(user_id, tuple(sessions))


def split_history(
    histories: Iterable[UserHistory], fraction: float = DEFAULT_SPLIT_FRACTION
) -> tuple[list[UserHistory], list[TestQuery]]:
    """Chronological per-user split at interaction granularity.

    The first floor(fraction * n) interactions stay as history; the rest
    become test queries whose relevant set is the clicked set. When the
    boundary falls inside a session, the head of that session becomes the
    user's short-term history H^s.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    kept: list[UserHistory] = []
    tests: list[TestQuery] = []
    for h in histories:
        items = h.interactions
        n = len(items)
        if n < 2:
            log.warning("user %s has %d interaction(s); excluded from split", h.user_id, n)
            continue
        k = split_point(n, fraction)
        head, tail = items[:k], items[k:]
        cut = bool(head) and head[-1].session_id != "" and head[-1].session_id == tail[0].session_id
        kept.append(_history_from(h.user_id, head, cut))
        for it in tail:
            tests.append(
                TestQuery(
                    user_id=h.user_id,
                    query=it.query,
                    timestamp=it.timestamp,
                    relevant=frozenset(it.clicked),
                    session_id=it.session_id,
                    skipped=it.skipped,
                )
            )
    return kept, tests


def truncate_history(history: UserHistory, fraction: float) -> UserHistory:
    """Keep only the most recent ``fraction`` of a user's interactions."""
    items = history.interactions
    keep = len(items) if fraction >= 1.0 else split_point(len(items), fraction)
    recent = items[len(items) - keep:] if keep else []
    short = history.short_term
    cut = (
        short is not None
        and bool(recent)
        and recent[-1].session_id == short.session_id
        and len(short) > 0
    )
    return _history_from(history.user_id, recent, cut)
