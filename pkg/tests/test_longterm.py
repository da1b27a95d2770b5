from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cops.cognition import FunctionProvider, MockProvider, ProviderConfig
from cops.logmodel import Session
from cops.longterm import (
    LongTermFormatError,
    LongTermStore,
    append_session,
    encode_slot,
    encode_store,
    load,
    partition_windows,
    persist,
    retrieve_profile,
)

from conftest import TABLE4_EXPLICIT, TABLE4_IMPLICIT, it


def run(n, start=0, sid="s1", step=10):
    return [it(f"query {start + i}", 1000 + (start + i) * step, sid, [f"d{start + i}"])
            for i in range(n)]


@given(st.integers(0, 400), st.integers(1, 80))
def test_count_partition_covers_history(n, w):
    slots = partition_windows(run(n), w)
    assert [len(s.interactions) for s in slots[:-1]] == [w] * (len(slots) - 1)
    assert sum(len(s.interactions) for s in slots) == n
    assert len(slots) == -(-n // w)
    flat = [i for s in slots for i in s.interactions]
    assert flat == run(n)


def test_time_partition_skips_empty_windows():
    items = [it("a", 0), it("b", 10), it("c", 250), it("d", 260)]
    slots = partition_windows(items, mode="time", window_seconds=100)
    assert [[i.query for i in s.interactions] for s in slots] == [["a", "b"], ["c", "d"]]
    assert [s.index for s in slots] == [0, 1]


def test_partition_rejects_bad_settings():
    with pytest.raises(ValueError):
        partition_windows(run(3), 0)
    with pytest.raises(ValueError):
        partition_windows(run(3), mode="weekly")


def test_encode_parses_table4_reply(table4_provider):
    slot = partition_windows(run(10))[0]
    entries = encode_slot(slot, table4_provider, "explicit")
    assert [e.topic for e in entries] == ["Shoes", "Cosmetics Products", "Salon Services"]
    assert entries[1].interests == ("MAC", "Loreal Paris Hair")
    implicit = encode_slot(slot, table4_provider, "implicit")
    assert [(e.attribute, e.value) for e in implicit][0] == ("Gender", "Female")
    assert slot.raw_summary == TABLE4_EXPLICIT


def test_encode_store_slot_counts(table4_provider):
    store = encode_store("u", run(120), table4_provider, 50)
    assert [len(s.interactions) for s in store.slots] == [50, 50, 20]
    assert all(s.encoded for s in store.slots)
    assert store.n_entries == 3 * 6


def test_provider_failure_leaves_slot_unencoded():
    bad = MockProvider([{"match": "", "error": "down"}])
    store = encode_store("u", run(5), bad)
    assert not store.slots[0].encoded
    assert "down" in store.slots[0].error
    assert store.slots[0].explicit == []


def test_unparseable_reply_keeps_raw():
    p = FunctionProvider(lambda s: "no structure here at all")
    slot = partition_windows(run(3))[0]
    assert encode_slot(slot, p, "explicit") == []
    assert slot.raw_summary == "no structure here at all"


def test_long_slot_split_across_budget():
    p = FunctionProvider(lambda s: "Topic: x", ProviderConfig(input_budget=400))
    items = [it("long query words " * 8 + str(i), i, "s1", [f"d{i}"]) for i in range(50)]
    slot = partition_windows(items, 50)[0]
    encode_slot(slot, p, "explicit")
    assert len(p.sink) > 1
    assert all(r.prompt_tokens <= 400 for r in p.sink.records)


def test_persist_round_trip(tmp_path, table4_provider):
    store = encode_store("u", run(60), table4_provider)
    path = tmp_path / "m.json"
    persist(store, path)
    again = load(path)
    assert again.to_dict() == store.to_dict()
    persist(again, tmp_path / "n.json")
    assert (tmp_path / "n.json").read_bytes() == path.read_bytes()


def test_corrupt_file_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"slots": [\n  {"index": 0,,}\n]}')
    with pytest.raises(LongTermFormatError, match=r"line 2"):
        load(path)
    path.write_text(json.dumps({"slots": [{"start_ts": 1}]}))
    with pytest.raises(LongTermFormatError):
        load(path)


def test_append_session_tops_up_then_opens(table4_provider):
    store = encode_store("u", run(45), table4_provider)
    touched = append_session(store, Session("s9", tuple(run(10, 45, "s9"))), table4_provider)
    assert [len(s.interactions) for s in store.slots] == [50, 5]
    assert touched == [0, 1]
    assert all(s.encoded for s in store.slots)


def test_append_session_rejects_out_of_order(table4_provider):
    store = encode_store("u", run(5, 100), table4_provider)
    with pytest.raises(ValueError):
        append_session(store, Session("s0", tuple(run(2, 0, "s0"))), table4_provider)


def test_append_to_empty_store(table4_provider):
    store = LongTermStore("u")
    append_session(store, Session("s1", tuple(run(3))), table4_provider)
    assert len(store.slots) == 1 and store.slots[0].encoded


def test_retrieve_llm_mode(table4_provider):
    store = encode_store("u", run(10), table4_provider)
    prof = retrieve_profile(store, "maybelline", table4_provider)
    assert prof.interests == TABLE4_EXPLICIT.splitlines()
    assert prof.background == TABLE4_IMPLICIT.splitlines()
    assert not prof.fallback


def test_retrieve_none_reply_gives_nothing(table4_provider):
    store = encode_store("u", run(10), table4_provider)
    prof = retrieve_profile(store, "q", MockProvider([{"match": "", "reply": "None"}]))
    assert prof.empty


def test_retrieve_lexical_mode(table4_provider):
    store = encode_store("u", run(10), table4_provider)
    prof = retrieve_profile(store, "designer shoes", mode="lexical", top_k=5)
    assert prof.interests == ["Shoes: sandals, designer shoes"]
    assert prof.background == []


def test_retrieve_falls_back_when_every_call_fails(table4_provider):
    store = encode_store("u", run(10), table4_provider)
    bad = MockProvider([{"match": "", "error": "down"}])
    prof = retrieve_profile(store, "salon hair", bad)
    assert prof.fallback
    assert "Salon Services: Killeen, Texas, hair styling" in prof.interests


def test_retrieve_kinds_filter(table4_provider):
    store = encode_store("u", run(10), table4_provider)
    prof = retrieve_profile(store, "q", table4_provider, kinds=["implicit"])
    assert prof.interests == [] and prof.background


def test_retrieve_rejects_empty_query(table4_provider):
    with pytest.raises(ValueError):
        retrieve_profile(LongTermStore(), "  ", table4_provider)
