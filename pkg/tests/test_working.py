from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cops.cognition import FunctionProvider, MockProvider, ProviderConfig
from cops.longterm import encode_store
from cops.text import estimate_tokens
from cops.working import TOGGLES, WorkingContext, assemble, model_user, render_user_prompt

from conftest import TABLE4_MODEL, TABLE4_REWRITE, it


@pytest.fixture
def store(table4_provider):
    return encode_store("u", [it(f"q{i}", i, "s0", ["d1"]) for i in range(8)], table4_provider)


def recent(n):
    return [it(f"recent {i}", 100 + i, "s1", ["d2"]) for i in range(n)]


def test_full_assembly(table4_provider, store):
    ctx = assemble("maybelline new yorky", recent(8), store, table4_provider)
    assert ctx.rewritten_query == TABLE4_REWRITE
    assert [i.query for i in ctx.recent] == [f"recent {i}" for i in range(3, 8)]
    assert ctx.interests and ctx.background
    assert ctx.degradations == []


def test_toggles_off_leave_fields_empty(table4_provider, store):
    ctx = assemble("q", recent(3), store, table4_provider, toggles=set())
    assert ctx.rewritten_query == "q"
    assert ctx.recent == [] and ctx.interests == [] and ctx.background == []
    ctx = assemble("q", recent(3), store, table4_provider, toggles={"retrieve_implicit"})
    assert ctx.interests == [] and ctx.background


def test_unknown_toggle_rejected(table4_provider):
    with pytest.raises(ValueError):
        assemble("q", [], None, table4_provider, toggles={"dream"})


@given(st.integers(0, 12), st.integers(0, 8))
def test_recent_truncation(n, m):
    ctx = assemble("q", recent(n), None, None, toggles=TOGGLES, m=m)
    assert len(ctx.recent) == min(n, m)
    assert ctx.recent == recent(n)[n - len(ctx.recent):]


def test_rewrite_failure_degrades(store):
    bad = MockProvider([{"match": "query re-writer", "error": "down"}])
    ctx = assemble("q", [], None, bad, toggles={"rewrite"})
    assert ctx.rewritten_query == "q" and "rewrite" in ctx.degradations


def test_no_provider_uses_lexical_retrieval(store):
    ctx = assemble("designer shoes", [], store, None)
    assert ctx.interests == ["Shoes: sandals, designer shoes"]


def test_model_user_table4(table4_provider, store):
    ctx = assemble("maybelline new yorky", recent(2), store, table4_provider)
    assert model_user(ctx, table4_provider).text == TABLE4_MODEL


def test_model_user_fallbacks():
    ctx = WorkingContext("orig", "rewritten")
    assert model_user(ctx, None).text == "rewritten"
    bad = MockProvider([{"match": "", "error": "down"}])
    um = model_user(ctx, bad)
    assert um.text == "rewritten" and um.degraded
    empty = FunctionProvider(lambda s: "   ")
    assert model_user(ctx, empty).text == "rewritten"


def test_blank_rewrite_falls_back_to_query():
    assert WorkingContext("orig", "  ").rewritten_query == "orig"


def test_prompt_sections_present(store, table4_provider):
    ctx = WorkingContext("orig", "rw", recent(1), ["Shoes: sandals"], [])
    prompt = render_user_prompt(ctx, table4_provider)
    assert "rw" in prompt and "Shoes: sandals" in prompt and "recent 0" in prompt
    assert "(none)" in prompt


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300), st.integers(0, 40), st.integers(300, 1500))
def test_user_prompt_fits_budget(n_int, n_bg, n_recent, budget):
    ctx = WorkingContext(
        "q", "rewritten query",
        recent(n_recent),
        [f"Topic{i}: interest words here" for i in range(n_int)],
        [f"Attr{i}: value" for i in range(n_bg)],
    )
    p = FunctionProvider(lambda s: "short summary", ProviderConfig(input_budget=budget))
    prompt = render_user_prompt(ctx, p)
    assert estimate_tokens(prompt) <= budget
    assert "rewritten query" in prompt
