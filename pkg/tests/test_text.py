from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from cops.text import estimate_tokens, max_words, normalize_query, tokenize, truncate_to_budget


def test_tokenize_examples():
    assert tokenize("Maybelline New-York!") == ["maybelline", "new", "york"]
    assert tokenize("") == []
    assert tokenize("C3PO 2x") == ["c3po", "2x"]


def test_tokenize_stopwords_off_by_default():
    assert tokenize("the cat") == ["the", "cat"]
    assert tokenize("the cat", frozenset({"the"})) == ["cat"]


def test_normalize_query():
    assert normalize_query("  Cats ") == "cats"
    assert normalize_query("Maybelline,  New York!") == "maybelline new york"


def test_estimate_tokens_rounds_up():
    assert estimate_tokens("") == 0
    assert estimate_tokens("a") == 2          # ceil(1.3)
    assert estimate_tokens("a b c d e f g h i j") == 13


@given(st.integers(min_value=0, max_value=10_000))
def test_max_words_is_the_largest_fit(budget):
    n = max_words(budget)
    assert estimate_tokens(" ".join(["w"] * n)) <= budget
    assert estimate_tokens(" ".join(["w"] * (n + 1))) > budget


@given(st.text(), st.integers(min_value=0, max_value=200))
def test_truncate_respects_budget(text, budget):
    out = truncate_to_budget(text, budget)
    assert estimate_tokens(out) <= max(budget, 0) or out == text and estimate_tokens(text) <= budget
    assert out.split() == text.split()[: len(out.split())]
