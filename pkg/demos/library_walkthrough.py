"""Library walkthrough on a small synthetic log.

Generates a 20-user log, splits it, builds every user's memories with the
rule-based mock provider, then compares the full pipeline with a few
ablations on queries the users never issued before.

    python demos/library_walkthrough.py
"""

from __future__ import annotations

import io
import logging

from cops.cognition import MockProvider
from cops.evaluate import (
    ablation_markdown,
    ablation_suite,
    build_states,
    evaluate_run,
    metrics_markdown,
    split_repeated,
    subset_report,
)
from cops.logmodel import parse_log, split_history
from cops.pipeline import Pipeline, PipelineConfig, format_case
from cops.ranking import BM25Index, bm25_topk
from cops.synthgen import GenConfig, generate, mock_rules


def main() -> None:
    logging.basicConfig(level=logging.WARNING)

    # 1. a synthetic log in the usual seven-column layout, plus its corpus
    synth = generate(GenConfig(seed=1, n_users=20))
    parsed = parse_log(io.StringIO(synth.log_tsv()))
    print(f"{len(parsed.histories)} users, {parsed.n_interactions} interactions, "
          f"{len(synth.corpus)} documents")

    # 2. chronological split; each test query gets BM25 top-50 candidates
    histories, tests = split_history(parsed.histories)
    index = BM25Index(synth.corpus)
    for tq in tests:
        tq.candidates = bm25_topk(index, tq.query, 50, inject=sorted(tq.relevant))

    # 3. memories. The mock cannot summarize, so both encoders keep the
    #    rendered interactions; its one rule folds whatever retrieval found
    #    into the user model, which is enough to carry the topic signal.
    provider = MockProvider(mock_rules()["rules"])
    titles = {d.doc_id: d.title for d in synth.corpus}
    pipe = Pipeline(PipelineConfig(ranker="term", retrieval="lexical"), provider, titles)
    states = build_states(pipe, histories)

    # 4. one unseen query, stage by stage
    rep, fresh = split_repeated(tests, histories)
    tq = fresh[0]
    _, trace = pipe.handle_query(states[tq.user_id], tq)
    print("\n" + format_case(trace, titles[min(tq.relevant)]))

    # 5. overall numbers, split by whether the query was seen before
    res = evaluate_run(tests, states, pipe, label="full")
    subsets = [subset_report(res, {t.key for t in rep}, "repeated"),
               subset_report(res, {t.key for t in fresh}, "non-repeated")]
    print(metrics_markdown([res.report, *subsets]))

    # 6. switch each memory unit off in turn
    print(ablation_markdown(ablation_suite(tests, states, pipe)))


if __name__ == "__main__":
    main()
