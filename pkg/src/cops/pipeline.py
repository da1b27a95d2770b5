"""Per-query orchestration: sensory probe, working-memory assembly and user
modeling, then the configured ranker, with ablation toggles and tracing."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Mapping
from dataclasses import dataclass, field, fields

from .cognition.prompts import PromptTemplate, default_templates
from .cognition.providers import Provider
from .logmodel import Session, TestQuery, UserHistory, segment_sessions
from .longterm import LongTermStore, append_session, encode_store
from .ranking import (
    B,
    BORDA_LAMBDA,
    K1,
    LLM_STRIDE,
    LLM_WINDOW,
    PCLICK_BETA,
    RankedResult,
    RankerUnavailable,
    VectorClient,
    llm_rank,
    pclick_rank,
    term_rank,
    vector_rank,
)
from .sensory import NO_MATCH_TEXT, SensoryStore, build_sensory, probe, update_sensory
from .working import UserModelText, assemble, model_user

log = logging.getLogger(__name__)

RANKERS = ("term", "llm", "vector", "pclick")


@dataclass(frozen=True)
class Toggles:
    sensory: bool = True
    working: bool = True
    longterm_explicit: bool = True
    longterm_implicit: bool = True

    def without(self, unit: str) -> Toggles:
        if unit not in {f.name for f in fields(self)}:
            raise ValueError(f"unknown memory unit {unit!r}")
        return Toggles(**{f.name: (getattr(self, f.name) and f.name != unit) for f in fields(self)})

    @classmethod
    def all_off(cls) -> Toggles:
        return cls(False, False, False, False)

    def label(self) -> str:
        return "".join("●" if getattr(self, f.name) else "○" for f in fields(self))


@dataclass
class PipelineConfig:
    toggles: Toggles = field(default_factory=Toggles)
    ranker: str = "llm"
    recent: int = 5
    window_size: int = 50
    window_mode: str = "count"
    window_seconds: int = 7 * 86400
    retrieval: str = "llm"
    retrieval_top_k: int = 5
    progressive: bool = False
    llm_window: int = LLM_WINDOW
    llm_stride: int = LLM_STRIDE
    pclick_beta: float = PCLICK_BETA
    borda_lambda: float = BORDA_LAMBDA
    k1: float = K1
    b: float = B

    def __post_init__(self) -> None:
        if self.ranker not in RANKERS:
            raise ValueError(f"ranker must be one of {RANKERS}")
        if self.retrieval not in ("llm", "lexical"):
            raise ValueError("retrieval must be 'llm' or 'lexical'")
        if self.recent < 0 or self.window_size < 1:
            raise ValueError("recent >= 0 and window_size >= 1 required")


@dataclass
class UserState:
    user_id: str
    sensory: SensoryStore
    longterm: LongTermStore
    short_term: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def short_term_session(self) -> str | None:
        return self.short_term[-1].session_id if self.short_term else None


@dataclass
class QueryTrace:
    """What each stage produced for one query; absent stages stay ``None``."""

    user_id: str
    query: str
    timestamp: int
    sensory: str | list[str] | None = None
    rewritten_query: str | None = None
    explicit: list[str] | None = None
    implicit: list[str] | None = None
    user_model: str | None = None
    final_ranking: list[str] = field(default_factory=list)
    answered_by: str = ""
    degradations: list[str] = field(default_factory=list)
    latency: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "user_id": self.user_id,
            "query": self.query,
            "timestamp": self.timestamp,
            "sensory": self.sensory,
            "rewritten_query": self.rewritten_query,
            "explicit": self.explicit,
            "implicit": self.implicit,
            "user_model": self.user_model,
            "final_ranking": self.final_ranking,
            "answered_by": self.answered_by,
            "degradations": self.degradations,
        }
        if include_timing:
            d["latency"] = self.latency
        return d

    @property
    def total_latency(self) -> float:
        return self.latency.get("total", 0.0)


class Pipeline:
    """Runs queries for any number of users against one provider."""

    def __init__(
        self,
        config: PipelineConfig | None = None,
        provider: Provider | None = None,
        titles: Mapping[str, str] | None = None,
        vector_client: VectorClient | None = None,
        templates: Mapping[str, PromptTemplate] | None = None,
    ) -> None:
        self.config = config or PipelineConfig()
        self.provider = provider
        self.titles = titles or {}
        self.vector_client = vector_client
        self.templates = templates or default_templates()

    # -- state ----------------------------------------------------------

    def build_state(self, history: UserHistory, jobs: int = 1) -> UserState:
        """Sensory store over H^l and H^s, long-term memory over H^l."""
        cfg = self.config
        if self.provider is None:
            raise ValueError("building long-term memory needs a provider")
        longterm = encode_store(
            history.user_id, history.long_term_interactions, self.provider, cfg.window_size,
            self.titles, self.templates, cfg.window_mode, cfg.window_seconds, jobs,
        )
        short = list(history.short_term.interactions) if history.short_term else []
        return UserState(history.user_id, build_sensory(history), longterm, short)

    def end_of_session(self, state: UserState, session: Session | None = None) -> None:
        """Fold a finished session (default: the current H^s) into memory."""
        with state.lock:
            sessions = [session] if session is not None else segment_sessions(state.short_term)
            for sess in sessions:
                if not sess.interactions:
                    continue
                update_sensory(state.sensory, sess)
                if self.provider is None:
                    continue
                try:
                    append_session(state.longterm, sess, self.provider, self.titles,
                                   self.templates)
                except ValueError as exc:
                    log.warning("session %s not added to long-term memory: %s",
                                sess.session_id, exc)
            state.short_term = []

    # -- query ----------------------------------------------------------

    def _rank(self, state: UserState, tq: TestQuery, user_model: str,
              trace: QueryTrace) -> RankedResult:
        cfg = self.config
        cands = tq.candidates
        try:
            if cfg.ranker == "llm":
                if self.provider is None:
                    raise RankerUnavailable("no provider for the llm ranker")
                return llm_rank(self.provider, tq.query, user_model, cands, cfg.llm_window,
                                cfg.llm_stride, self.templates["rank"])
            if cfg.ranker == "vector":
                return vector_rank(self.vector_client, user_model, cands)
            if cfg.ranker == "pclick":
                return pclick_rank(state.sensory, tq.query, cands, cfg.pclick_beta,
                                   cfg.borda_lambda)
        except RankerUnavailable as exc:
            log.warning("%s ranker unavailable, using term ranker: %s", cfg.ranker, exc)
            trace.degradations.append(f"ranker:{cfg.ranker}")
            result = term_rank(user_model, cands, cfg.k1, cfg.b)
            result.degraded = True
            return result
        return term_rank(user_model, cands, cfg.k1, cfg.b)

    def handle_query(self, state: UserState, tq: TestQuery) -> tuple[RankedResult, QueryTrace]:
        if not tq.candidates:
            raise ValueError("test query has no candidates")
        cfg, tg = self.config, self.config.toggles
        trace = QueryTrace(tq.user_id, tq.query, tq.timestamp)
        t_start = time.perf_counter()
        ids = tq.candidate_ids

        if tg.sensory:
            resp = probe(state.sensory, tq.query, ids)
            trace.latency["sensory"] = time.perf_counter() - t_start
            if resp.matched:
                trace.sensory = list(resp.ranking)
                result = RankedResult.from_order(resp.ranking, "sensory")
                return self._finish(result, trace, t_start)
            trace.sensory = NO_MATCH_TEXT

        t0 = time.perf_counter()
        toggles = set()
        if tg.working:
            toggles |= {"rewrite", "recent"}
        if tg.longterm_explicit:
            toggles.add("retrieve_explicit")
        if tg.longterm_implicit:
            toggles.add("retrieve_implicit")
        recent = [i for i in state.short_term
                  if not tq.session_id or i.session_id == tq.session_id]
        ctx = assemble(tq.query, recent, state.longterm, self.provider, toggles, cfg.recent,
                       cfg.retrieval, cfg.retrieval_top_k, self.templates)
        trace.degradations.extend(ctx.degradations)
        if tg.working:
            trace.rewritten_query = ctx.rewritten_query
        if tg.longterm_explicit:
            trace.explicit = list(ctx.interests)
        if tg.longterm_implicit:
            trace.implicit = list(ctx.background)
        trace.latency["working"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if tg.working:
            um = model_user(ctx, self.provider, self.titles, self.templates["model_user"])
            if um.degraded:
                trace.degradations.append("user_model")
        else:
            um = UserModelText(tq.query)
        trace.user_model = um.text
        trace.latency["user_model"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        result = self._rank(state, tq, um.text, trace)
        trace.latency["rank"] = time.perf_counter() - t0
        if result.parse_failure:
            trace.degradations.append("rank_parse")
        if result.degraded and cfg.ranker == "llm" and "ranker:llm" not in trace.degradations:
            trace.degradations.append("rank_provider")
        return self._finish(result, trace, t_start)

    @staticmethod
    def _finish(result: RankedResult, trace: QueryTrace,
                t_start: float) -> tuple[RankedResult, QueryTrace]:
        trace.final_ranking = result.doc_ids
        trace.answered_by = result.ranker
        trace.latency["total"] = time.perf_counter() - t_start
        return result, trace


def format_case(trace: QueryTrace, ground_truth: str | None = None) -> str:
    """Two-column case-study view of one trace; skipped stages read "-"."""
    profile: list[str] = []
    if trace.explicit is not None:
        profile += ["Explicit Memory Retrieval", *(f"-{e}" for e in trace.explicit)]
    if trace.implicit is not None:
        profile += ["Implicit Memory Retrieval", *(f"-{e}" for e in trace.implicit)]
    sensory = trace.sensory
    if isinstance(sensory, list):
        sensory = "Re-finding match: " + " > ".join(sensory)
    rows = [
        ("Query", [trace.query]),
        ("Sensory Response", [sensory or "-"]),
        ("Query Re-writing", [trace.rewritten_query or "-"]),
        ("User Profile Retrieval", profile or ["-"]),
        ("User Modeling", [trace.user_model or "-"]),
    ]
    if ground_truth:
        rows.append(("Ground-truth document", [ground_truth]))
    width = max(len(name) for name, _ in rows)
    out = []
    for name, values in rows:
        for i, v in enumerate(values):
            out.append(f"{(name if i == 0 else ''):<{width}} | {v}")
    return "\n".join(out) + "\n"
