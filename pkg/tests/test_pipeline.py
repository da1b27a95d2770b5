from __future__ import annotations

import json

import pytest

from cops.cognition import FunctionProvider, MockProvider
from cops.logmodel import DocumentRef, Session, TestQuery, UserHistory
from cops.pipeline import Pipeline, PipelineConfig, Toggles, format_case
from cops.ranking import term_rank
from cops.sensory import NO_MATCH_TEXT

from conftest import TABLE4_EXPLICIT, TABLE4_IMPLICIT, TABLE4_MODEL, TABLE4_REWRITE, it

CORPUS = [
    DocumentRef("d01", "Summer sandals for women"),
    DocumentRef("d02", "Garden hose reels"),
    DocumentRef("d03", "Designer shoes outlet sale"),
    DocumentRef("d04", "MAC lipstick shades"),
    DocumentRef("d05", "Loreal Paris hair color guide"),
    DocumentRef("d06", "Hair styling salons in Killeen, Texas"),
    DocumentRef("d07", "Prom dress ideas and trends"),
    DocumentRef("d08", "Make up products, Make up tips, and fashion trends maybelline new york"),
    DocumentRef("d09", "New York city travel guide"),
    DocumentRef("d10", "Yorkshire terrier care"),
]
TITLES = {d.doc_id: d.title for d in CORPUS}


def table4_history() -> UserHistory:
    lt = (
        Session("s1", (it("summer sandals", 100, "s1", ["d01"], ["d02"]),
                       it("designer shoes sale", 400, "s1", ["d03"]))),
        Session("s2", (it("mac lipstick", 90_000, "s2", ["d04"]),
                       it("loreal paris hair color", 90_400, "s2", ["d05"]))),
        Session("s3", (it("hair salon killeen texas", 180_000, "s3", ["d06"], ["d02"]),)),
    )
    return UserHistory("A1", lt, Session("s4", (it("prom dress ideas", 270_000, "s4", ["d07"]),)))


def table4_query(query="Maybelline new yorky") -> TestQuery:
    return TestQuery("A1", query, 270_500, list(CORPUS), frozenset({"d08"}), "s4")


def make(provider, **cfg) -> Pipeline:
    return Pipeline(PipelineConfig(**{"ranker": "term", **cfg}), provider, TITLES)


def test_table4_trace(table4_provider):
    pipe = make(table4_provider)
    state = pipe.build_state(table4_history())
    result, trace = pipe.handle_query(state, table4_query())
    assert trace.sensory == NO_MATCH_TEXT
    assert trace.rewritten_query == TABLE4_REWRITE
    assert trace.explicit == TABLE4_EXPLICIT.splitlines()
    assert trace.implicit == TABLE4_IMPLICIT.splitlines()
    assert trace.user_model == TABLE4_MODEL
    assert result.doc_ids[0] == "d08"
    assert trace.final_ranking == result.doc_ids
    assert trace.degradations == []
    text = format_case(trace, TITLES["d08"])
    assert "Query Re-writing       | Maybelline New York make up" in text
    assert "-Gender: Female" in text


def test_sensory_short_circuit(table4_provider):
    pipe = make(table4_provider)
    state = pipe.build_state(table4_history())
    n_before = len(table4_provider.sink)
    result, trace = pipe.handle_query(state, table4_query("Summer  Sandals"))
    assert result.ranker == "sensory" and result.doc_ids[0] == "d01"
    assert sorted(result.doc_ids) == sorted(TITLES)
    assert trace.rewritten_query is None and trace.user_model is None
    assert len(table4_provider.sink) == n_before  # no provider call was made


def test_all_off_equals_plain_term_rank(table4_provider):
    pipe = make(table4_provider, toggles=Toggles.all_off())
    state = pipe.build_state(table4_history())
    tq = table4_query()
    result, trace = pipe.handle_query(state, tq)
    assert result.doc_ids == term_rank(tq.query, tq.candidates).doc_ids
    assert trace.user_model == tq.query
    assert trace.sensory is None and trace.explicit is None and trace.implicit is None


def test_working_off_models_with_the_query(table4_provider):
    pipe = make(table4_provider, toggles=Toggles().without("working"))
    state = pipe.build_state(table4_history())
    _, trace = pipe.handle_query(state, table4_query())
    assert trace.user_model == "Maybelline new yorky"
    assert trace.rewritten_query is None
    assert trace.explicit == TABLE4_EXPLICIT.splitlines()


def test_sensory_toggle_is_invisible_without_a_match(table4_provider):
    on, off = make(table4_provider), make(table4_provider, toggles=Toggles().without("sensory"))
    a = on.handle_query(on.build_state(table4_history()), table4_query())[0]
    b = off.handle_query(off.build_state(table4_history()), table4_query())[0]
    assert a.doc_ids == b.doc_ids


def test_recent_is_restricted_to_the_query_session():
    seen = []
    p = FunctionProvider(lambda s: seen.append(s) or "x")
    pipe = make(p)
    state = pipe.build_state(table4_history())
    tq = table4_query()
    tq.session_id = "other"
    pipe.handle_query(state, tq)
    model_prompts = [s for s in seen if "[Recent Interactions]" in s]
    assert model_prompts and "prom dress" not in model_prompts[-1]


def test_ranking_is_deterministic(synth_small):
    provider = MockProvider(synth_small["rules"])
    pipe = Pipeline(PipelineConfig(ranker="llm"), provider, synth_small["titles"])
    runs = []
    for _ in range(2):
        state = pipe.build_state(synth_small["histories"][0])
        tqs = [t for t in synth_small["tests"] if t.user_id == state.user_id]
        runs.append([json.dumps(pipe.handle_query(state, t)[1].to_dict()) for t in tqs])
    assert runs[0] == runs[1]


def test_end_of_session_updates_both_stores(table4_provider):
    pipe = make(table4_provider)
    state = pipe.build_state(table4_history())
    slots_before = sum(len(s.interactions) for s in state.longterm.slots)
    state.short_term.append(it("brand new query", 270_600, "s4", ["d09"]))
    pipe.end_of_session(state)
    assert state.short_term == []
    assert state.sensory.counts("brand new query") == {"d09": 1}
    assert sum(len(s.interactions) for s in state.longterm.slots) == slots_before + 2
    result, _ = pipe.handle_query(state, table4_query("brand new query"))
    assert result.ranker == "sensory" and result.doc_ids[0] == "d09"


def test_unavailable_ranker_degrades_to_term(table4_provider):
    pipe = make(table4_provider, ranker="vector")
    state = pipe.build_state(table4_history())
    result, trace = pipe.handle_query(state, table4_query())
    assert result.degraded and "ranker:vector" in trace.degradations
    assert result.ranker == "term"


def test_provider_outage_still_ranks():
    bad = MockProvider([{"match": "", "error": "down"}])
    pipe = make(bad, ranker="llm")
    state = pipe.build_state(table4_history())
    result, trace = pipe.handle_query(state, table4_query())
    assert sorted(result.doc_ids) == sorted(TITLES)
    assert {"rewrite", "user_model", "rank_provider"} <= set(trace.degradations)


def test_empty_candidates_rejected(table4_provider):
    pipe = make(table4_provider)
    state = pipe.build_state(table4_history())
    tq = table4_query()
    tq.candidates = []
    with pytest.raises(ValueError):
        pipe.handle_query(state, tq)


def test_trace_omits_timing_by_default(table4_provider):
    pipe = make(table4_provider)
    _, trace = pipe.handle_query(pipe.build_state(table4_history()), table4_query())
    assert "latency" not in trace.to_dict()
    assert trace.to_dict(include_timing=True)["latency"]["total"] == trace.total_latency > 0


def test_toggles_helpers():
    assert Toggles().label() == "●●●●"
    assert Toggles().without("working").label() == "●○●●"
    assert Toggles.all_off().label() == "○○○○"
    with pytest.raises(ValueError):
        Toggles().without("dreams")
    with pytest.raises(ValueError):
        PipelineConfig(ranker="magic")
