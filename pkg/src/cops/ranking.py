"""Rankers over a candidate pool: BM25 term ranker, listwise LLM ranker,
external vector-scoring client, P-Click with Borda fusion, and BM25 top-k
candidate generation."""

from __future__ import annotations

import json
import logging
import math
import urllib.error
import urllib.request
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from .cognition.parsing import parse_ranking
from .cognition.prompts import PromptTemplate, default_templates
from .cognition.providers import Provider, ProviderError
from .logmodel import DocumentRef
from .sensory import SensoryStore
from .text import estimate_tokens, normalize_query, tokenize, truncate_to_budget

log = logging.getLogger(__name__)

K1 = 1.2
B = 0.75
PCLICK_BETA = 0.5
BORDA_LAMBDA = 1.0
LLM_WINDOW = 20
LLM_STRIDE = 10
BODY_PREVIEW_CHARS = 200


class RankerUnavailable(RuntimeError):
    """The selected ranker cannot serve this request."""


@dataclass(frozen=True)
class RankedItem:
    doc_id: str
    score: float | None
    rank: int


@dataclass
class RankedResult:
    items: list[RankedItem]
    ranker: str
    parse_failure: bool = False
    degraded: bool = False

    @property
    def doc_ids(self) -> list[str]:
        return [it.doc_id for it in self.items]

    @classmethod
    def from_order(
        cls, doc_ids: Sequence[str], ranker: str, scores: Mapping[str, float] | None = None, **kw
    ) -> RankedResult:
        items = [
            RankedItem(d, None if scores is None else scores.get(d), r)
            for r, d in enumerate(doc_ids, start=1)
        ]
        return cls(items, ranker, **kw)


# -- BM25 -------------------------------------------------------------------


@dataclass
class CorpusStats:
    N: int
    df: dict[str, int]
    avgdl: float

    @classmethod
    def from_token_lists(cls, token_lists: Iterable[Sequence[str]]) -> CorpusStats:
        df: Counter[str] = Counter()
        n = total = 0
        for toks in token_lists:
            n += 1
            total += len(toks)
            df.update(set(toks))
        if n == 0:
            raise ValueError("corpus statistics need at least one document")
        return cls(n, dict(df), total / n if total else 1.0)

    @classmethod
    def from_docs(cls, docs: Iterable[DocumentRef | str]) -> CorpusStats:
        return cls.from_token_lists(tokenize(_doc_text(d)) for d in docs)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.N - df + 0.5) / (df + 0.5) + 1.0)


def _doc_text(doc: DocumentRef | str) -> str:
    return doc if isinstance(doc, str) else doc.text


def _bm25(query_terms: Sequence[str], tf: Mapping[str, int], dl: int, stats: CorpusStats,
          k1: float, b: float) -> float:
    norm = k1 * (1.0 - b + b * dl / stats.avgdl)
    score = 0.0
    for t in query_terms:
        f = tf.get(t, 0)
        if f:
            score += stats.idf(t) * f * (k1 + 1.0) / (f + norm)
    return score


def bm25_score(query_text: str, doc: DocumentRef | str, stats: CorpusStats,
               k1: float = K1, b: float = B) -> float:
    """Okapi BM25 with the non-negative idf ln((N - df + .5) / (df + .5) + 1).

    Repeated query terms contribute once per occurrence.
    """
    terms = tokenize(_doc_text(doc))
    return _bm25(tokenize(query_text), Counter(terms), len(terms), stats, k1, b)


def _sort_by_score(scores: Sequence[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def pool_scores(query_text: str, texts: Sequence[str], k1: float = K1, b: float = B) -> list[float]:
    """BM25 of one query against every text, statistics taken over the texts."""
    token_lists = [tokenize(t) for t in texts]
    stats = CorpusStats.from_token_lists(token_lists)
    q = tokenize(query_text)
    return [_bm25(q, Counter(t), len(t), stats, k1, b) for t in token_lists]


def term_rank(user_model: str, candidates: Sequence[DocumentRef], k1: float = K1,
              b: float = B) -> RankedResult:
    """BM25 of the user-model text against each candidate, with statistics
    taken over the candidate pool itself."""
    if not candidates:
        raise ValueError("term_rank needs candidates")
    scores = pool_scores(user_model, [d.text for d in candidates], k1, b)
    order = _sort_by_score(scores)
    ids = [candidates[i].doc_id for i in order]
    return RankedResult.from_order(ids, "term", {candidates[i].doc_id: scores[i] for i in order})


class BM25Index:
    """Inverted index over a corpus for first-stage candidate generation."""

    def __init__(self, docs: Iterable[DocumentRef], k1: float = K1, b: float = B) -> None:
        self.docs = list(docs)
        if not self.docs:
            raise ValueError("corpus is empty")
        self.k1, self.b = k1, b
        self.by_id = {d.doc_id: i for i, d in enumerate(self.docs)}
        self.lengths: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        token_lists = []
        for i, d in enumerate(self.docs):
            toks = tokenize(d.text)
            token_lists.append(toks)
            self.lengths.append(len(toks))
            for t, f in Counter(toks).items():
                self.postings.setdefault(t, []).append((i, f))
        self.stats = CorpusStats.from_token_lists(token_lists)

    def scores(self, query: str) -> dict[int, float]:
        acc: dict[int, float] = {}
        stats, k1, b = self.stats, self.k1, self.b
        for t in tokenize(query):
            plist = self.postings.get(t)
            if not plist:
                continue
            idf = stats.idf(t)
            for i, f in plist:
                norm = k1 * (1.0 - b + b * self.lengths[i] / stats.avgdl)
                acc[i] = acc.get(i, 0.0) + idf * f * (k1 + 1.0) / (f + norm)
        return acc

    def topk(self, query: str, k: int) -> list[tuple[DocumentRef, float]]:
        acc = self.scores(query)
        hits = sorted(acc, key=lambda i: (-acc[i], i))[:k]
        if len(hits) < k:
            taken = set(hits)
            for i in range(len(self.docs)):
                if len(hits) >= k:
                    break
                if i not in taken:
                    hits.append(i)
        return [(self.docs[i], acc.get(i, 0.0)) for i in hits]


def bm25_topk(
    corpus: BM25Index | Sequence[DocumentRef],
    query: str,
    k: int = 50,
    inject: Iterable[str] = (),
    titles: Mapping[str, str] | None = None,
) -> list[DocumentRef]:
    """Top-k corpus documents for ``query``, zero-score documents filling in
    corpus order. Ids in ``inject`` that did not make the cut are appended
    after position k, so ground-truth clicks are always present."""
    index = corpus if isinstance(corpus, BM25Index) else BM25Index(corpus)
    out = [d for d, _ in index.topk(query, k)]
    present = {d.doc_id for d in out}
    for doc_id in inject:
        if doc_id in present:
            continue
        present.add(doc_id)
        if doc_id in index.by_id:
            out.append(index.docs[index.by_id[doc_id]])
        else:
            out.append(DocumentRef(doc_id, (titles or {}).get(doc_id, ""), ""))
    return out


# -- LLM listwise ranker ----------------------------------------------------


def _render_candidates(docs: Sequence[DocumentRef], body_chars: int) -> str:
    lines = []
    for i, d in enumerate(docs, start=1):
        body = " ".join(d.body[:body_chars].split()) if body_chars else ""
        lines.append(f"[{i}] {d.title}: {body}" if body else f"[{i}] {d.title}")
    return "\n".join(lines)


def _window_prompt(template: PromptTemplate, query: str, prefs: str,
                   docs: Sequence[DocumentRef], budget: int) -> str:
    for chars in (BODY_PREVIEW_CHARS, 100, 50, 0):
        prompt = template.render(query=query, preferences=prefs,
                                 candidates=_render_candidates(docs, chars))
        if estimate_tokens(prompt) <= budget:
            return prompt
    # still too long: shrink the preference text, the only unbounded field left
    room = budget - estimate_tokens(template.render(
        query=query, preferences="", candidates=_render_candidates(docs, 0)))
    return template.render(query=query, preferences=truncate_to_budget(prefs, max(room, 0)),
                           candidates=_render_candidates(docs, 0))


def llm_rank(
    provider: Provider,
    query: str,
    user_model: str,
    candidates: Sequence[DocumentRef],
    window: int = LLM_WINDOW,
    stride: int = LLM_STRIDE,
    template: PromptTemplate | None = None,
) -> RankedResult:
    """Listwise ranking by the provider, sliding a window from the tail of the
    list to its head so strong documents bubble forward."""
    if not candidates:
        raise ValueError("llm_rank needs candidates")
    if not 0 < stride <= window:
        raise ValueError("need 0 < stride <= window")
    template = template or default_templates()["rank"]
    order = list(range(len(candidates)))
    parse_failure = degraded = False
    if len(order) == 1:
        return RankedResult.from_order([candidates[0].doc_id], "llm")
    end = len(order)
    while True:
        start = max(0, end - window)
        slot = order[start:end]
        docs = [candidates[i] for i in slot]
        prompt = _window_prompt(template, query, user_model, docs, provider.config.input_budget)
        try:
            reply = provider.complete(prompt)
        except ProviderError as exc:
            log.info("llm ranker window failed, keeping order: %s", exc)
            degraded = True
            reply = None
        if reply is not None:
            perm, failed = parse_ranking(reply, len(slot))
            parse_failure |= failed
            order[start:end] = [slot[p - 1] for p in perm]
        if start == 0:
            break
        end -= stride
    return RankedResult.from_order([candidates[i].doc_id for i in order], "llm",
                                   parse_failure=parse_failure, degraded=degraded)


# -- vector-scoring service client ------------------------------------------


@dataclass
class VectorClient:
    """Client for an external cross-encoder scoring service.

    Wire format: POST ``{"pairs": [{"text_a", "text_b"}]}`` and receive
    ``{"scores": [float, ...]}`` in the same order.
    """

    endpoint: str
    timeout: float = 30.0
    batch_size: int = 64

    def score(self, text_a: str, texts_b: Sequence[str]) -> list[float]:
        scores: list[float] = []
        for i in range(0, len(texts_b), self.batch_size):
            batch = texts_b[i:i + self.batch_size]
            body = json.dumps({"pairs": [{"text_a": text_a, "text_b": t} for t in batch]})
            req = urllib.request.Request(self.endpoint, data=body.encode("utf-8"),
                                         headers={"Content-Type": "application/json"},
                                         method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                got = [float(s) for s in payload["scores"]]
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise RankerUnavailable(f"vector service failed: {exc}") from exc
            if len(got) != len(batch):
                raise RankerUnavailable("vector service returned a wrong number of scores")
            scores.extend(got)
        return scores


def vector_rank(client: VectorClient | None, user_model: str,
                candidates: Sequence[DocumentRef]) -> RankedResult:
    if not candidates:
        raise ValueError("vector_rank needs candidates")
    if client is None:
        raise RankerUnavailable("no vector service configured")
    scores = client.score(user_model, [d.text for d in candidates])
    order = _sort_by_score(scores)
    return RankedResult.from_order([candidates[i].doc_id for i in order], "vector",
                                   {candidates[i].doc_id: scores[i] for i in order})


# -- P-Click ----------------------------------------------------------------


def pclick_rank(
    clicks: SensoryStore | Mapping[str, Mapping[str, int]],
    query: str,
    candidates: Sequence[DocumentRef | str],
    beta: float = PCLICK_BETA,
    weight: float = BORDA_LAMBDA,
) -> RankedResult:
    """Re-rank by past clicks on the same query, fused with the original
    order by Borda count.

    pscore(d) = clicks(q, d) / (clicks(q) + beta); the Borda score is
    (n - original rank) + weight * (n - pscore rank). Ties go to the higher
    pscore, then the original order.
    """
    ids = [c if isinstance(c, str) else c.doc_id for c in candidates]
    if not ids:
        raise ValueError("pclick_rank needs candidates")
    entries = clicks.entries if isinstance(clicks, SensoryStore) else clicks
    counts = entries.get(normalize_query(query), {})
    total = sum(counts.values())
    n = len(ids)
    pscore = [counts.get(d, 0) / (total + beta) for d in ids]
    prank = {i: r for r, i in enumerate(_sort_by_score(pscore), start=1)}
    borda = [(n - (i + 1)) + weight * (n - prank[i]) for i in range(n)]
    order = sorted(range(n), key=lambda i: (-borda[i], -pscore[i], i))
    return RankedResult.from_order([ids[i] for i in order], "pclick",
                                   {ids[i]: borda[i] for i in order})
