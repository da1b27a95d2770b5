"""Replay evaluation: ranking metrics, run aggregation, repeated/non-repeated
splits, history-length sweeps and memory-unit ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

from .logmodel import TestQuery, UserHistory, truncate_history
from .pipeline import Pipeline, QueryTrace, Toggles, UserState
from .text import normalize_query

log = logging.getLogger(__name__)

PIMP_VERSION = "pimp-v1"
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))


# -- metrics -------------------------------------------------------------

def average_precision(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    rel = set(relevant)
    hits, total = 0, 0.0
    for k, doc in enumerate(ranking, start=1):
        if doc in rel:
            hits += 1
            total += hits / k
    return total / hits if hits else 0.0


def reciprocal_rank(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    rel = set(relevant)
    for k, doc in enumerate(ranking, start=1):
        if doc in rel:
            return 1.0 / k
    return 0.0


def p_at_1(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    return 1.0 if ranking and ranking[0] in set(relevant) else 0.0


class PairCounts(NamedTuple):
    improved: int
    degraded: int
    total_inverse: int


def p_improve(original: Sequence[str], new: Sequence[str], relevant: Iterable[str]) -> PairCounts:
    """Count (relevant, non-relevant) pairs fixed or broken by the re-ranking.

    ``total_inverse`` counts pairs the original order got wrong; ``improved``
    are those the new order gets right. ``degraded`` counts originally correct
    pairs the new order gets wrong.
    """
    if len(original) != len(new) or set(original) != set(new) or len(set(original)) != len(original):
        raise ValueError("rankings must be permutations of the same candidates")
    rel = set(relevant)
    r_old = {d: i for i, d in enumerate(original)}
    r_new = {d: i for i, d in enumerate(new)}
    pos = [d for d in original if d in rel]
    neg = [d for d in original if d not in rel]
    improved = degraded = inverse = 0
    for p in pos:
        for q in neg:
            if r_old[p] > r_old[q]:
                inverse += 1
                improved += r_new[p] < r_new[q]
            else:
                degraded += r_new[p] > r_new[q]
    return PairCounts(improved, degraded, inverse)


# -- per-query rows and reports -----------------------------------------

@dataclass
class QueryRow:
    user_id: str
    query: str
    timestamp: int
    ap: float = 0.0
    rr: float = 0.0
    p1: float = 0.0
    improved: int = 0
    degraded: int = 0
    inverse: int = 0
    answered_by: str = ""
    degradations: list[str] = field(default_factory=list)
    latency: float = 0.0
    status: str = "ok"  # ok | no_relevant | failed
    error: str | None = None

    def to_dict(self, include_latency: bool = False) -> dict:
        d = asdict(self)
        if not include_latency:
            d.pop("latency")
        return d


def _percentile(values: Sequence[float], q: float) -> float:
    if not values:
        return 0.0
    s = sorted(values)
    idx = min(len(s) - 1, max(0, math.ceil(q * len(s)) - 1))
    return s[idx]


@dataclass
class MetricReport:
    label: str = ""
    map: float = 0.0
    mrr: float = 0.0
    p_at_1: float = 0.0
    p_imp: float = 0.0
    p_imp_macro: float = 0.0
    n_queries: int = 0
    n_no_relevant: int = 0
    n_failed: int = 0
    improved_pairs: int = 0
    degraded_pairs: int = 0
    inverse_pairs: int = 0
    sensory_answered: int = 0
    degradations: dict[str, int] = field(default_factory=dict)
    latency_mean: float = 0.0
    latency_p50: float = 0.0
    latency_p95: float = 0.0
    averaging: str = "query"
    pimp_version: str = PIMP_VERSION

    def to_dict(self, include_latency: bool = False) -> dict:
        d = asdict(self)
        if not include_latency:
            for k in ("latency_mean", "latency_p50", "latency_p95"):
                d.pop(k)
        return d


def aggregate(rows: Sequence[QueryRow], label: str = "", by: str = "query") -> MetricReport:
    """Average over scored queries (``by="query"``) or per-user means."""
    if by not in ("query", "user"):
        raise ValueError("by must be 'query' or 'user'")
    ok = [r for r in rows if r.status == "ok"]
    rep = MetricReport(label=label, averaging=by, n_queries=len(ok))
    rep.n_no_relevant = sum(r.status == "no_relevant" for r in rows)
    rep.n_failed = sum(r.status == "failed" for r in rows)
    done = [r for r in rows if r.status != "failed"]
    rep.sensory_answered = sum(r.answered_by == "sensory" for r in done)
    rep.degradations = dict(sorted(Counter(d for r in done for d in r.degradations).items()))
    lat = [r.latency for r in done]
    if lat:
        rep.latency_mean = statistics.fmean(lat)
        rep.latency_p50 = _percentile(lat, 0.5)
        rep.latency_p95 = _percentile(lat, 0.95)
    if not ok:
        return rep

    if by == "query":
        groups = [[r] for r in ok]
    else:
        per_user: dict[str, list[QueryRow]] = defaultdict(list)
        for r in ok:
            per_user[r.user_id].append(r)
        groups = list(per_user.values())

    def mean_of(attr: str) -> float:
        return statistics.fmean(statistics.fmean(getattr(r, attr) for r in g) for g in groups)

    rep.map, rep.mrr, rep.p_at_1 = mean_of("ap"), mean_of("rr"), mean_of("p1")
    rep.improved_pairs = sum(r.improved for r in ok)
    rep.degraded_pairs = sum(r.degraded for r in ok)
    rep.inverse_pairs = sum(r.inverse for r in ok)
    rep.p_imp = rep.improved_pairs / rep.inverse_pairs if rep.inverse_pairs else 0.0
    with_pairs = [r.improved / r.inverse for r in ok if r.inverse]
    rep.p_imp_macro = statistics.fmean(with_pairs) if with_pairs else 0.0
    return rep


def score_query(tq: TestQuery, ranking: Sequence[str], trace: QueryTrace | None = None) -> QueryRow:
    row = QueryRow(tq.user_id, tq.query, tq.timestamp)
    if trace is not None:
        row.answered_by = trace.answered_by
        row.degradations = list(trace.degradations)
        row.latency = trace.total_latency
    rel = set(tq.relevant) & set(tq.candidate_ids)
    if not rel:
        row.status = "no_relevant"
        return row
    row.ap = average_precision(ranking, rel)
    row.rr = reciprocal_rank(ranking, rel)
    row.p1 = p_at_1(ranking, rel)
    row.improved, row.degraded, row.inverse = p_improve(tq.candidate_ids, ranking, rel)
    return row


@dataclass
class RunResult:
    report: MetricReport
    rows: list[QueryRow]
    traces: list[QueryTrace | None]

    def traces_jsonl(self, include_timing: bool = False) -> str:
        return "".join(
            json.dumps(t.to_dict(include_timing), ensure_ascii=False, sort_keys=True) + "\n"
            for t in self.traces if t is not None
        )


def _run_user(pipeline: Pipeline, state: UserState | None, queries: list[tuple[int, TestQuery]],
              progressive: bool) -> list[tuple[int, QueryRow, QueryTrace | None]]:
    out = []
    for idx, tq in queries:
        if state is None:
            row = QueryRow(tq.user_id, tq.query, tq.timestamp, status="failed",
                           error="no memory state for user")
            out.append((idx, row, None))
            continue
        if progressive and state.short_term and state.short_term_session != tq.session_id:
            pipeline.end_of_session(state)
        try:
            result, trace = pipeline.handle_query(state, tq)
        except Exception as exc:  # one bad query must not sink the run
            log.warning("query %r of user %s failed: %s", tq.query, tq.user_id, exc)
            row = QueryRow(tq.user_id, tq.query, tq.timestamp, status="failed", error=str(exc))
            out.append((idx, row, None))
            continue
        out.append((idx, score_query(tq, result.doc_ids, trace), trace))
        if progressive:
            with state.lock:
                state.short_term.append(tq.as_interaction())
    return out


def evaluate_run(
    tests: Sequence[TestQuery],
    states: Mapping[str, UserState],
    pipeline: Pipeline,
    jobs: int = 1,
    label: str = "",
    by: str = "query",
) -> RunResult:
    """Run every test query through ``pipeline`` and aggregate.

    Users are processed in parallel with ``jobs`` threads; rows keep the
    input order. In progressive mode the states are mutated: each test
    query joins H^s after it is answered and finished sessions are encoded.
    """
    progressive = pipeline.config.progressive
    per_user: dict[str, list[tuple[int, TestQuery]]] = defaultdict(list)
    for i, tq in enumerate(tests):
        per_user[tq.user_id].append((i, tq))
    if progressive:
        for qs in per_user.values():
            qs.sort(key=lambda p: p[1].timestamp)

    def work(uid: str) -> list:
        return _run_user(pipeline, states.get(uid), per_user[uid], progressive)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(work, per_user))
    else:
        chunks = [work(uid) for uid in per_user]

    rows: list[QueryRow | None] = [None] * len(tests)
    traces: list[QueryTrace | None] = [None] * len(tests)
    for chunk in chunks:
        for idx, row, trace in chunk:
            rows[idx], traces[idx] = row, trace
    final_rows = [r for r in rows if r is not None]
    return RunResult(aggregate(final_rows, label, by), final_rows, traces)


# -- splits, sweeps, ablations ------------------------------------------

def split_repeated(
    tests: Sequence[TestQuery], histories: Iterable[UserHistory]
) -> tuple[list[TestQuery], list[TestQuery]]:
    """Partition by whether the normalized query was issued before."""
    seen = {h.user_id: {normalize_query(q) for q in h.queries} for h in histories}
    repeated, fresh = [], []
    for tq in tests:
        (repeated if normalize_query(tq.query) in seen.get(tq.user_id, ()) else fresh).append(tq)
    return repeated, fresh


def subset_report(result: RunResult, keys: set[tuple[str, int, str]], label: str,
                  by: str = "query") -> MetricReport:
    rows = [r for r in result.rows if (r.user_id, r.timestamp, r.query) in keys]
    return aggregate(rows, label, by)


StateBuilder = Callable[[Sequence[UserHistory]], Mapping[str, UserState]]


def build_states(pipeline: Pipeline, histories: Iterable[UserHistory],
                 jobs: int = 1) -> dict[str, UserState]:
    return {h.user_id: pipeline.build_state(h, jobs) for h in histories}


def history_sweep(
    fractions: Sequence[float],
    tests: Sequence[TestQuery],
    histories: Sequence[UserHistory],
    pipeline: Pipeline,
    builder: StateBuilder | None = None,
    jobs: int = 1,
) -> list[tuple[float, MetricReport]]:
    """Rebuild memories from the most recent fraction of history and evaluate."""
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    builder = builder or (lambda hs: build_states(pipeline, hs))
    curve = []
    for f in fractions:
        truncated = [truncate_history(h, f) for h in histories]
        res = evaluate_run(tests, builder(truncated), pipeline, jobs, label=f"{f:g}")
        curve.append((f, res.report))
        log.info("fraction %.2f: MAP %.4f", f, res.report.map)
    return curve


ABLATION_ROWS = ("sensory", "working", "longterm_explicit", "longterm_implicit", None)


@dataclass
class AblationRow:
    toggles: Toggles
    report: MetricReport

    def map_delta(self, full: MetricReport) -> float:
        return (self.report.map - full.map) / full.map if full.map else 0.0

    def latency_ratio(self, full: MetricReport) -> float:
        return self.report.latency_mean / full.latency_mean if full.latency_mean else 0.0


def ablation_suite(
    tests: Sequence[TestQuery],
    states: Mapping[str, UserState] | Callable[[], Mapping[str, UserState]],
    pipeline: Pipeline,
    jobs: int = 1,
) -> list[AblationRow]:
    """Each memory unit off once, then everything on; full row last.

    Pass a zero-argument callable for ``states`` when the pipeline is
    progressive, so every configuration starts from fresh memories.
    """
    rows = []
    base = pipeline.config.toggles
    for unit in ABLATION_ROWS:
        toggles = base.without(unit) if unit else base
        pipe = Pipeline(replace(pipeline.config, toggles=toggles), pipeline.provider,
                        pipeline.titles, pipeline.vector_client, pipeline.templates)
        st = states() if callable(states) else states
        res = evaluate_run(tests, st, pipe, jobs, label=toggles.label())
        rows.append(AblationRow(toggles, res.report))
    return rows


# -- writers ---------------------------------------------------------------

def _num(x: float) -> str:
    return f"{x:.4f}".lstrip("0") if 0 <= x < 1 else f"{x:.4f}"


def metrics_markdown(reports: Sequence[MetricReport], pimp: str = "micro") -> str:
    """Table with one row per report; ``pimp`` picks micro or macro P-imp."""
    if pimp not in ("micro", "macro"):
        raise ValueError("pimp must be 'micro' or 'macro'")
    lines = ["| Model | MAP | MRR | P@1 | P-imp | Queries |", "|---|---|---|---|---|---|"]
    for r in reports:
        pi = r.p_imp if pimp == "micro" else r.p_imp_macro
        lines.append(f"| {r.label} | {_num(r.map)} | {_num(r.mrr)} | {_num(r.p_at_1)} "
                     f"| {_num(pi)} | {r.n_queries} |")
    return "\n".join(lines) + "\n"


def write_metrics(out_dir: str | Path, result: RunResult,
                  extra: Sequence[MetricReport] = (), include_timing: bool = False,
                  pimp: str = "micro") -> None:
    """metrics.json, metrics.md, traces.jsonl and latency.json.

    Timings vary run to run, so they stay out of metrics.json and the traces
    unless ``include_timing`` is set; latency.json always has them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "overall": result.report.to_dict(),
        "subsets": [r.to_dict() for r in extra],
        "queries": [r.to_dict() for r in result.rows],
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (out / "metrics.md").write_text(metrics_markdown([result.report, *extra], pimp), encoding="utf-8")
    (out / "traces.jsonl").write_text(result.traces_jsonl(include_timing), encoding="utf-8")
    lat = {
        "overall": {k: getattr(result.report, k)
                    for k in ("latency_mean", "latency_p50", "latency_p95")},
        "stages": _stage_means(result.traces),
    }
    (out / "latency.json").write_text(json.dumps(lat, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _stage_means(traces: Iterable[QueryTrace | None]) -> dict[str, float]:
    acc: dict[str, list[float]] = defaultdict(list)
    for t in traces:
        if t is not None:
            for k, v in t.latency.items():
                acc[k].append(v)
    return {k: statistics.fmean(v) for k, v in sorted(acc.items())}


def write_curve(path: str | Path, curve: Sequence[tuple[float, MetricReport]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "map", "mrr", "p1", "pimp"])
        for f, r in curve:
            w.writerow([f"{f:g}", f"{r.map:.6f}", f"{r.mrr:.6f}", f"{r.p_at_1:.6f}",
                        f"{r.p_imp:.6f}"])


def ablation_markdown(rows: Sequence[AblationRow], model: str = "CoPS") -> str:
    full = rows[-1].report
    lines = [
        "| Model | Sensory | Working | Long-E | Long-I | MAP | Δ MAP | Latency (s) | × Latency | Sensory answered |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        t, r = row.toggles, row.report
        marks = " | ".join("●" if v else "○" for v in
                           (t.sensory, t.working, t.longterm_explicit, t.longterm_implicit))
        if row is rows[-1]:
            delta = ratio = "-"
        else:
            d = row.map_delta(full)
            arrow = "↓ " if d < 0 else "↑ " if d > 0 else ""
            delta = f"{arrow}{abs(d) * 100:.2f}%"
            ratio = f"×{row.latency_ratio(full):.2f}"
        lines.append(f"| {model} | {marks} | {_num(r.map)} | {delta} | {r.latency_mean:.4f} "
                     f"| {ratio} | {r.sensory_answered} |")
    return "\n".join(lines) + "\n"
