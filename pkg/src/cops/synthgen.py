"""Deterministic synthetic query logs with topical structure and planted
re-finding events.

Vocabulary is cut into disjoint topic blocks. Every topic has a handful of
brand words; a document's title is its brand plus two of its body terms.
Users favour one brand per topic, so their click history carries a signal
that plain query matching does not see.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .logmodel import DEFAULT_SPLIT_FRACTION, DocumentRef, Interaction, split_point
from .ranking import pool_scores
from .text import normalize_query, tokenize

log = logging.getLogger(__name__)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
BODY_MIN, BODY_MAX = 30, 80
QUERY_MIN, QUERY_MAX = 2, 4
BASE_TIME = 1_600_000_000
_MAX_TRIES = 200


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 1
    n_users: int = 200
    sessions_per_user: int = 19
    interactions_per_session: int = 7
    topics_per_user: int = 3
    vocab_size: int = 2000
    refind_rate: float = 0.3
    corpus_size: int = 800
    docs_per_topic: int = 40
    brands_per_topic: int = 5
    skipped_per_query: int = 3
    split_fraction: float = DEFAULT_SPLIT_FRACTION

    def __post_init__(self) -> None:
        counts = ("n_users", "sessions_per_user", "interactions_per_session", "topics_per_user",
                  "vocab_size", "corpus_size", "docs_per_topic", "brands_per_topic")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.skipped_per_query < 0:
            raise ValueError("skipped_per_query must be >= 0")
        if not 0.0 <= self.refind_rate <= 1.0:
            raise ValueError("refind_rate must lie in [0, 1]")

    @property
    def n_topics(self) -> int:
        return self.corpus_size // self.docs_per_topic

    def check(self) -> None:
        """Raise :class:`InfeasibleConfig` when the corpus cannot host the topics."""
        if self.n_topics < 1:
            raise InfeasibleConfig("corpus_size is smaller than docs_per_topic")
        if self.topics_per_user > self.n_topics:
            raise InfeasibleConfig(
                f"{self.topics_per_user} topics per user but only {self.n_topics} topics fit")
        content = self.vocab_size // self.n_topics - self.brands_per_topic
        if content < BODY_MIN:
            raise InfeasibleConfig(
                f"{content} content terms per topic; at least {BODY_MIN} are needed")
        if self.docs_per_topic < self.brands_per_topic:
            raise InfeasibleConfig("fewer docs per topic than brands")
        syllables = len(_CONSONANTS) * len(_VOWELS)
        if self.vocab_size > syllables ** 2 + syllables ** 3:
            raise InfeasibleConfig("vocab_size too large for the word generator")


@dataclass
class Topic:
    index: int
    brands: list[str]
    terms: list[str]
    docs: list[DocumentRef] = field(default_factory=list)
    doc_brand: dict[str, str] = field(default_factory=dict)
    doc_terms: dict[str, set[str]] = field(default_factory=dict)


@dataclass
class SynthLog:
    config: GenConfig
    corpus: list[DocumentRef]
    lines: list[str]
    manifest: dict

    def corpus_jsonl(self) -> str:
        return "".join(
            json.dumps({"doc_id": d.doc_id, "title": d.title, "body": d.body}) + "\n"
            for d in self.corpus)

    def log_tsv(self) -> str:
        return "".join(self.lines)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": out / "corpus.jsonl",
            "log": out / "log.tsv",
            "manifest": out / "manifest.json",
            "mock_rules": out / "mock_rules.json",
        }
        paths["corpus"].write_text(self.corpus_jsonl(), encoding="utf-8")
        paths["log"].write_text(self.log_tsv(), encoding="utf-8")
        paths["manifest"].write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
        paths["mock_rules"].write_text(json.dumps(mock_rules(), indent=2) + "\n",
                                       encoding="utf-8")
        return paths


def mock_rules() -> dict:
    """Rules for the mock provider that turn retrieved interests into the user
    model: the reply is the re-written query followed by the interest lines."""
    return {
        "rules": [
            {
                "match": (r"\[User interests\]\n(?P<interests>.*?)\n\n\[Recent Interactions\]"
                          r".*?\[Re-written Query\]\n(?P<query>.*?)\n\n"),
                "regex": True,
                "reply": r"\g<query> \g<interests>",
            }
        ]
    }


def _vocabulary(rng: random.Random, size: int) -> list[str]:
    syll = [c + v for c in _CONSONANTS for v in _VOWELS]
    words: dict[str, None] = {}
    while len(words) < size:
        n = rng.choice((2, 3))
        words.setdefault("".join(rng.choice(syll) for _ in range(n)), None)
    return list(words)


def _build_topics(rng: random.Random, cfg: GenConfig) -> list[Topic]:
    vocab = _vocabulary(rng, cfg.vocab_size)
    block = cfg.vocab_size // cfg.n_topics
    topics = []
    for t in range(cfg.n_topics):
        words = vocab[t * block:(t + 1) * block]
        topic = Topic(t, words[:cfg.brands_per_topic], words[cfg.brands_per_topic:])
        hi = min(BODY_MAX, len(topic.terms))
        for j in range(cfg.docs_per_topic):
            doc_id = f"D{t:03d}{j:04d}"
            brand = topic.brands[j % len(topic.brands)]
            body_terms = rng.sample(topic.terms, rng.randint(BODY_MIN, hi))
            title = " ".join([brand.capitalize(), *rng.sample(body_terms, 2)])
            topic.docs.append(DocumentRef(doc_id, title, " ".join(body_terms)))
            topic.doc_brand[doc_id] = brand
            topic.doc_terms[doc_id] = set(tokenize(title)) | set(body_terms)
        topics.append(topic)
    return topics


def _fresh(rng: random.Random, topic: Topic, brand: str, used: set[str],
           n_skip: int) -> tuple[str, str, list[str]] | None:
    """A new query, its clicked doc and skipped siblings, or None."""
    targets = [d for d in topic.docs if topic.doc_brand[d.doc_id] == brand]
    for _ in range(_MAX_TRIES):
        target = rng.choice(targets)
        body = target.body.split()
        terms = rng.sample(body, rng.randint(QUERY_MIN, QUERY_MAX))
        query = " ".join(terms)
        if normalize_query(query) in used:
            continue
        qset = set(terms)
        pool = [d for d in topic.docs if d.doc_id != target.doc_id
                and len(qset & topic.doc_terms[d.doc_id]) <= 1]
        siblings = rng.sample(pool, min(n_skip, len(pool)))
        if siblings:
            scores = pool_scores(query, [d.text for d in [target, *siblings]])
            siblings = [d for d, s in zip(siblings, scores[1:]) if s < scores[0]]
        return query, target.doc_id, [d.doc_id for d in siblings]
    return None


def generate(cfg: GenConfig) -> SynthLog:
    """Build corpus, log lines and manifest; identical configs give identical output."""
    cfg.check()
    rng = random.Random(cfg.seed)
    topics = _build_topics(rng, cfg)
    corpus = [d for t in topics for d in t.docs]
    titles = {d.doc_id: d.title for d in corpus}

    lines: list[str] = []
    manifest_queries = []
    n_planted = n_tests = n_planted_all = 0
    n = cfg.sessions_per_user * cfg.interactions_per_session
    cut = split_point(n, cfg.split_fraction)
    for u in range(cfg.n_users):
        user_id = f"U{u:04d}"
        user_topics = rng.sample(topics, cfg.topics_per_user)
        prefs = {t.index: rng.choice(t.brands) for t in user_topics}
        used: set[str] = set()
        done: list[Interaction] = []
        ts = BASE_TIME + u * 10_000_000
        idx = 0
        for s in range(cfg.sessions_per_user):
            session_id = f"{user_id}-S{s:03d}"
            ts += 86_400
            for _ in range(cfg.interactions_per_session):
                ts += rng.randint(30, 600)
                earlier = done if idx < cut else done[:cut]
                if earlier and rng.random() < cfg.refind_rate:
                    src = rng.choice(earlier)
                    it = Interaction(src.query, ts, session_id, src.clicked, src.skipped)
                    planted = True
                else:
                    topic = rng.choice(user_topics)
                    got = _fresh(rng, topic, prefs[topic.index], used, cfg.skipped_per_query)
                    if got is None:
                        raise InfeasibleConfig(
                            f"could not draw a fresh query for {user_id}; vocabulary too small")
                    query, clicked, skipped = got
                    used.add(normalize_query(query))
                    it = Interaction(query, ts, session_id, (clicked,), tuple(skipped))
                    planted = False
                done.append(it)
                n_planted_all += planted
                for doc_id, tag in [(d, 1) for d in it.clicked] + [(d, 0) for d in it.skipped]:
                    lines.append("\t".join([user_id, session_id, it.query, str(ts), doc_id,
                                            titles[doc_id], str(tag)]) + "\n")
                if idx >= cut:
                    n_tests += 1
                    n_planted += planted
                    manifest_queries.append({
                        "user_id": user_id,
                        "query": it.query,
                        "timestamp": ts,
                        "planted": planted,
                        "planted_doc": it.clicked[0] if planted else None,
                    })
                idx += 1

    manifest = {
        "config": asdict(cfg),
        "n_docs": len(corpus),
        "n_interactions": cfg.n_users * n,
        "n_planted_total": n_planted_all,
        "n_test_queries": n_tests,
        "n_planted_test": n_planted,
        "planted_fraction": n_planted / n_tests if n_tests else 0.0,
        "test_queries": manifest_queries,
    }
    log.info("generated %d users, %d docs, %d test queries (%d planted)",
             cfg.n_users, len(corpus), n_tests, n_planted)
    return SynthLog(cfg, corpus, lines, manifest)
