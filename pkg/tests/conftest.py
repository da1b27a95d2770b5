from __future__ import annotations

import io

import pytest
from hypothesis import settings

from cops.cognition.providers import MockProvider
from cops.logmodel import DocumentRef, Interaction, Session, UserHistory, parse_log, split_history
from cops.ranking import BM25Index, bm25_topk
from cops.synthgen import GenConfig, generate, mock_rules

# wall-clock deadlines are noise on a shared single core; correctness checks stay
settings.register_profile("default", deadline=None)
settings.load_profile("default")

TABLE4_EXPLICIT = ("Shoes: sandals, designer shoes\n"
                   "Cosmetics Products: MAC, Loreal Paris Hair\n"
                   "Salon Services: Killeen, Texas, hair styling")
TABLE4_IMPLICIT = ("Gender: Female\nAge: teens to middle-aged\n"
                   "Social Image: Beauty Enthusiast, Fashion")
TABLE4_REWRITE = "Maybelline New York make up"
TABLE4_MODEL = "Fashion trends featuring Maybelline New York cosmetics and make up products"


def table4_rules() -> list[dict]:
    return [
        {"match": "summarize the user interests", "reply": TABLE4_EXPLICIT},
        {"match": "summarize the user background", "reply": TABLE4_IMPLICIT},
        {"match": "query re-writer", "reply": TABLE4_REWRITE},
        {"match": "personal interests related", "reply": TABLE4_EXPLICIT},
        {"match": "personal backgrounds related", "reply": TABLE4_IMPLICIT},
        {"match": "personalized query intent", "reply": TABLE4_MODEL},
    ]


def it(query: str, ts: int, sid: str = "s1", clicked=(), skipped=()) -> Interaction:
    return Interaction(query, ts, sid, tuple(clicked), tuple(skipped))


@pytest.fixture
def echo():
    return MockProvider([])


@pytest.fixture
def table4_provider():
    return MockProvider(table4_rules())


@pytest.fixture
def docs():
    return [
        DocumentRef("d1", "Cat care", "feeding a cat and grooming a cat"),
        DocumentRef("d2", "Dog walking", "leash training for dogs"),
        DocumentRef("d3", "Maybelline New York", "make up products and fashion trends"),
        DocumentRef("d4", "York travel", "visiting the old city of york"),
    ]


@pytest.fixture
def small_history():
    s1 = Session("s1", (it("cat food", 100, "s1", ["d1"], ["d2"]),
                        it("cat grooming", 200, "s1", ["d1"])))
    s2 = Session("s2", (it("maybelline", 5000, "s2", ["d3"]),))
    return UserHistory("u1", (s1,), s2)


@pytest.fixture(scope="session")
def synth_small():
    """A 12-user synthetic dataset with candidates attached."""
    g = generate(GenConfig(seed=7, n_users=12, sessions_per_user=6, interactions_per_session=5))
    parsed = parse_log(io.StringIO(g.log_tsv()))
    histories, tests = split_history(parsed.histories)
    index = BM25Index(g.corpus)
    for tq in tests:
        tq.candidates = bm25_topk(index, tq.query, 30, inject=sorted(tq.relevant))
    titles = {d.doc_id: d.title for d in g.corpus}
    return {"gen": g, "histories": histories, "tests": tests, "titles": titles,
            "rules": mock_rules()["rules"]}
