"""``cops`` command line: synth, ingest, build-memory, run, eval, ablate,
sweep and case, all driven by one TOML config file plus flag overrides."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, longterm
from .cognition.prompts import TemplateError, load_templates
from .cognition.providers import (
    HttpProvider,
    MockProvider,
    Provider,
    ProviderConfig,
    ProviderError,
    ReplayProvider,
    ReplyCache,
)
from .evaluate import (
    DEFAULT_FRACTIONS,
    ablation_markdown,
    ablation_suite,
    evaluate_run,
    history_sweep,
    split_repeated,
    subset_report,
    write_curve,
    write_metrics,
)
from .logmodel import (
    LogFormatError,
    TestQuery,
    UserHistory,
    load_corpus,
    parse_log,
    serialize_log,
    split_history,
)
from .pipeline import Pipeline, PipelineConfig, Toggles, UserState, format_case
from .ranking import BM25Index, VectorClient, bm25_topk
from .sensory import SensoryStore
from .synthgen import GenConfig, InfeasibleConfig, generate

log = logging.getLogger("cops")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ----------------------------------------------------------

_GEN_DEFAULTS = {f.name: f.default for f in fields(GenConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "paths": {
        "log": "", "corpus": "", "data": "data", "memory": "memory", "output": "out",
        "templates": "",
    },
    "provider": {
        "kind": "mock", "endpoint": "", "model": "gpt-3.5-turbo", "temperature": 0.2,
        "max_output_tokens": 512, "input_budget": 2048, "timeout": 30.0, "retries": 2,
        "concurrency": 4, "rules": "", "cache": "", "seed": 0,
    },
    "pipeline": {
        "sensory": True, "working": True, "longterm_explicit": True, "longterm_implicit": True,
        "ranker": "llm", "recent": 5, "window_size": 50, "window_mode": "count",
        "window_seconds": 7 * 86400, "candidate_k": 50, "split_fraction": 0.85,
        "retrieval": "llm", "retrieval_top_k": 5, "progressive": False,
        "vector_endpoint": "", "vector_timeout": 10.0,
    },
    "eval": {
        "fractions": list(DEFAULT_FRACTIONS), "pimp": "micro", "averaging": "query",
        "repeated_split": True, "trace_timings": False, "jobs": 1,
    },
    "synth": {**_GEN_DEFAULTS, "out": "synth"},
}
PATH_KEYS = {("paths", k) for k in DEFAULTS["paths"]} | {
    ("provider", "rules"), ("provider", "cache"), ("synth", "out")}


def _check_type(section: str, key: str, value: Any) -> Any:
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise UsageError(f"[{section}] {key}: expected {type(default).__name__}, "
                         f"got {value!r}")
    return value


def _merge(cfg: dict, data: dict, origin: str) -> None:
    for section, values in data.items():
        if section not in DEFAULTS or not isinstance(values, dict):
            raise UsageError(f"{origin}: unknown config section [{section}]")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise UsageError(f"{origin}: unknown config key [{section}] {key}")
            cfg[section][key] = _check_type(section, key, value)


def _parse_override(text: str) -> tuple[str, str, Any]:
    name, sep, raw = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise UsageError(f"--set expects section.key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return section, key, value


def load_config(path: str | None, overrides: list[str] = ()) -> dict[str, dict[str, Any]]:
    """Defaults, then the TOML file, then ``--set`` overrides; paths are made
    absolute relative to the config file (or the working directory)."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    base = Path.cwd()
    if path:
        p = Path(path)
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {p}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{p}: {exc}") from exc
        _merge(cfg, data, str(p))
        base = p.resolve().parent
    for item in overrides:
        section, key, value = _parse_override(item)
        _merge(cfg, {section: {key: value}}, "--set")
    for section, key in PATH_KEYS:
        if cfg[section][key]:
            cfg[section][key] = str((base / cfg[section][key]).resolve())
    return cfg


def _apply_flags(cfg: dict, args: argparse.Namespace) -> None:
    cwd = Path.cwd()
    flag_map = {
        "seed": [("provider", "seed"), ("synth", "seed")],
        "jobs": [("eval", "jobs")],
        "ranker": [("pipeline", "ranker")],
        "out": [("paths", "output")],
        "data": [("paths", "data")],
        "memory": [("paths", "memory")],
        "log": [("paths", "log")],
        "corpus": [("paths", "corpus")],
        "rules": [("provider", "rules")],
        "retrieval": [("pipeline", "retrieval")],
        "users": [("synth", "n_users")],
        "rho": [("synth", "refind_rate")],
        "synth_out": [("synth", "out")],
        "trace_timings": [("eval", "trace_timings")],
        "progressive": [("pipeline", "progressive")],
    }
    for attr, targets in flag_map.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        for section, key in targets:
            if (section, key) in PATH_KEYS:
                value = str((cwd / value).resolve())
            cfg[section][key] = _check_type(section, key, value)


# -- builders ---------------------------------------------------------------

def make_provider(cfg: dict) -> Provider:
    pc = cfg["provider"]
    try:
        config = ProviderConfig(
            endpoint=pc["endpoint"], model=pc["model"], temperature=pc["temperature"],
            max_output_tokens=pc["max_output_tokens"], input_budget=pc["input_budget"],
            timeout=pc["timeout"], retries=pc["retries"], concurrency=pc["concurrency"],
        )
    except ValueError as exc:
        raise UsageError(f"[provider] {exc}") from exc
    cache = ReplyCache(pc["cache"]) if pc["cache"] else None
    kind = pc["kind"]
    if kind == "mock":
        if pc["rules"]:
            _require(pc["rules"], "mock rules")
            return MockProvider.from_file(pc["rules"], seed=pc["seed"], config=config, cache=cache)
        return MockProvider([], seed=pc["seed"], config=config, cache=cache)
    if kind == "http":
        return HttpProvider(config, cache=cache)
    if kind == "cached":
        if cache is None:
            raise UsageError("provider kind 'cached' needs [provider] cache")
        _require(pc["cache"], "reply cache")
        return ReplayProvider(config, cache=cache)
    raise UsageError(f"unknown provider kind {kind!r} (mock, http, cached)")


def make_pipeline_config(cfg: dict) -> PipelineConfig:
    p = cfg["pipeline"]
    try:
        return PipelineConfig(
            toggles=Toggles(p["sensory"], p["working"], p["longterm_explicit"],
                            p["longterm_implicit"]),
            ranker=p["ranker"], recent=p["recent"], window_size=p["window_size"],
            window_mode=p["window_mode"], window_seconds=p["window_seconds"],
            retrieval=p["retrieval"], retrieval_top_k=p["retrieval_top_k"],
            progressive=p["progressive"],
        )
    except ValueError as exc:
        raise UsageError(f"[pipeline] {exc}") from exc


def make_pipeline(cfg: dict, titles: dict[str, str],
                  provider: Provider | None = None) -> Pipeline:
    p = cfg["pipeline"]
    vector = VectorClient(p["vector_endpoint"], p["vector_timeout"]) if p["vector_endpoint"] else None
    templates = None
    if cfg["paths"]["templates"]:
        templates = load_templates(_require(cfg["paths"]["templates"], "templates directory"))
    return Pipeline(make_pipeline_config(cfg), provider or make_provider(cfg), titles, vector,
                    templates)


def _require(path: str, what: str) -> Path:
    if not path:
        raise DataError(f"no {what} configured")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


# -- artifacts on disk ---------------------------------------------------------

def load_data(cfg: dict) -> tuple[list[UserHistory], list[TestQuery], dict[str, str]]:
    data = _require(cfg["paths"]["data"], "data directory (run `cops ingest` first)")
    split = json.loads(_require(str(data / "split.json"), "split.json").read_text("utf-8"))
    parsed = parse_log(_require(str(data / "history.tsv"), "history.tsv"))
    titles = dict(parsed.titles)
    histories = []
    for h in parsed.histories:
        short_id = split["users"].get(h.user_id, {}).get("short_term_session")
        if short_id is not None and h.long_term and h.long_term[-1].session_id == short_id:
            h = UserHistory(h.user_id, h.long_term[:-1], h.long_term[-1])
        histories.append(h)
    tests = []
    with open(_require(str(data / "test_queries.jsonl"), "test_queries.jsonl"),
              encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    tests.append(TestQuery.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"test_queries.jsonl:{lineno}: {exc}") from exc
    for tq in tests:
        for d in tq.candidates:
            titles.setdefault(d.doc_id, d.title)
    return histories, tests, titles


def _user_file(i: int) -> str:
    return f"{i:06d}.json"


def save_states(mem_dir: Path, states: dict[str, UserState], cfg: dict) -> None:
    (mem_dir / "sensory").mkdir(parents=True, exist_ok=True)
    (mem_dir / "longterm").mkdir(parents=True, exist_ok=True)
    index = {}
    for i, (uid, st) in enumerate(sorted(states.items())):
        name = _user_file(i)
        st.sensory.save(mem_dir / "sensory" / name)
        longterm.persist(st.longterm, mem_dir / "longterm" / name)
        index[uid] = name
    meta = {"users": index, "window_size": cfg["pipeline"]["window_size"],
            "window_mode": cfg["pipeline"]["window_mode"]}
    (mem_dir / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")


def load_states(cfg: dict, histories: list[UserHistory]) -> dict[str, UserState]:
    mem = _require(cfg["paths"]["memory"], "memory directory (run `cops build-memory` first)")
    index = json.loads(_require(str(mem / "index.json"), "memory index").read_text("utf-8"))
    states = {}
    for h in histories:
        name = index["users"].get(h.user_id)
        if name is None:
            log.warning("no memory for user %s", h.user_id)
            continue
        sensory = SensoryStore.load(_require(str(mem / "sensory" / name), "sensory store"))
        lt = longterm.load(_require(str(mem / "longterm" / name), "long-term store"))
        short = list(h.short_term.interactions) if h.short_term else []
        states[h.user_id] = UserState(h.user_id, sensory, lt, short)
    return states


def _build_all(pipe: Pipeline, histories: list[UserHistory], jobs: int) -> dict[str, UserState]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            built = list(pool.map(pipe.build_state, histories))
    else:
        built = [pipe.build_state(h) for h in histories]
    return {s.user_id: s for s in built}


# -- commands ----------------------------------------------------------------

def _check_eval(cfg: dict) -> None:
    ev = cfg["eval"]
    if ev["pimp"] not in ("micro", "macro"):
        raise UsageError("[eval] pimp must be 'micro' or 'macro'")
    if ev["averaging"] not in ("query", "user"):
        raise UsageError("[eval] averaging must be 'query' or 'user'")
    if ev["jobs"] < 1:
        raise UsageError("[eval] jobs must be >= 1")


def cmd_synth(cfg: dict, args: argparse.Namespace) -> int:
    s = cfg["synth"]
    try:
        gen = GenConfig(**{k: s[k] for k in _GEN_DEFAULTS})
    except ValueError as exc:
        raise UsageError(f"[synth] {exc}") from exc
    result = generate(gen)
    paths = result.write(s["out"])
    m = result.manifest
    print(f"wrote {paths['log'].parent}: {m['n_docs']} docs, {m['n_interactions']} interactions, "
          f"{m['n_test_queries']} test queries, planted fraction {m['planted_fraction']:.4f}")
    return EXIT_OK


def cmd_ingest(cfg: dict, args: argparse.Namespace) -> int:
    parsed = parse_log(_require(cfg["paths"]["log"], "log file"))
    corpus = load_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    fraction = cfg["pipeline"]["split_fraction"]
    try:
        histories, tests = split_history(parsed.histories, fraction)
    except ValueError as exc:
        raise UsageError(f"[pipeline] split_fraction: {exc}") from exc
    index = BM25Index(corpus.values())
    k = cfg["pipeline"]["candidate_k"]
    for tq in tests:
        tq.candidates = bm25_topk(index, tq.query, k, inject=sorted(tq.relevant),
                                  titles=parsed.titles)
    titles = dict(parsed.titles)
    out = Path(cfg["paths"]["data"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.tsv", "w", encoding="utf-8", newline="") as fh:
        serialize_log(histories, fh, titles)
    with open(out / "test_queries.jsonl", "w", encoding="utf-8") as fh:
        for tq in tests:
            fh.write(json.dumps(tq.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    n_test: dict[str, int] = {}
    for tq in tests:
        n_test[tq.user_id] = n_test.get(tq.user_id, 0) + 1
    kept = {h.user_id for h in histories}
    users = {
        h.user_id: {
            "n_history": len(h.interactions),
            "n_test": n_test.get(h.user_id, 0),
            "short_term_session": h.short_term.session_id if h.short_term else None,
        }
        for h in histories
    }
    excluded = sorted(h.user_id for h in parsed.histories if h.user_id not in kept)
    split = {"fraction": fraction, "candidate_k": k, "users": users, "excluded": excluded,
             "malformed_lines": parsed.malformed}
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    print(f"wrote {out}: {len(histories)} users, {len(tests)} test queries, "
          f"{len(excluded)} excluded")
    return EXIT_OK


def cmd_build_memory(cfg: dict, args: argparse.Namespace) -> int:
    histories, _, titles = load_data(cfg)
    pipe = make_pipeline(cfg, titles)
    states = _build_all(pipe, histories, cfg["eval"]["jobs"])
    slots = [s for st in states.values() for s in st.longterm.slots]
    failed = [s for s in slots if not s.encoded]
    if slots and len(failed) == len(slots):
        raise ProviderError(f"every memory slot failed to encode: {failed[0].error}")
    save_states(Path(cfg["paths"]["memory"]), states, cfg)
    print(f"wrote {cfg['paths']['memory']}: {len(states)} users, {len(slots)} slots "
          f"({len(failed)} unencoded)")
    return EXIT_OK


def _prepare_run(cfg: dict):
    histories, tests, titles = load_data(cfg)
    states = load_states(cfg, histories)
    return histories, tests, titles, states, make_pipeline(cfg, titles)


def cmd_run(cfg: dict, args: argparse.Namespace) -> int:
    _, tests, _, states, pipe = _prepare_run(cfg)
    res = evaluate_run(tests, states, pipe, cfg["eval"]["jobs"], label="CoPS",
                       by=cfg["eval"]["averaging"])
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "traces.jsonl").write_text(res.traces_jsonl(cfg["eval"]["trace_timings"]),
                                      encoding="utf-8")
    with open(out / "rankings.jsonl", "w", encoding="utf-8") as fh:
        for tq, t in zip(tests, res.traces):
            rec = {"user_id": tq.user_id, "query": tq.query, "timestamp": tq.timestamp,
                   "ranking": t.final_ranking if t else None}
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"wrote {out}: {len(res.rows)} queries, {res.report.n_failed} failed")
    return EXIT_OK


def cmd_eval(cfg: dict, args: argparse.Namespace) -> int:
    histories, tests, _, states, pipe = _prepare_run(cfg)
    ev = cfg["eval"]
    res = evaluate_run(tests, states, pipe, ev["jobs"], label="CoPS", by=ev["averaging"])
    extra = []
    if ev["repeated_split"]:
        rep, fresh = split_repeated(tests, histories)
        extra = [subset_report(res, {t.key for t in rep}, "CoPS (repeated)", ev["averaging"]),
                 subset_report(res, {t.key for t in fresh}, "CoPS (non-repeated)",
                               ev["averaging"])]
    out = Path(cfg["paths"]["output"])
    write_metrics(out, res, extra, ev["trace_timings"], pimp=ev["pimp"])
    r = res.report
    print(f"MAP {r.map:.4f}  MRR {r.mrr:.4f}  P@1 {r.p_at_1:.4f}  P-imp {r.p_imp:.4f}  "
          f"({r.n_queries} queries, {r.sensory_answered} via sensory) -> {out}")
    return EXIT_OK


def cmd_ablate(cfg: dict, args: argparse.Namespace) -> int:
    histories, tests, _, states, pipe = _prepare_run(cfg)
    if pipe.config.progressive:
        source = lambda: load_states(cfg, histories)  # noqa: E731
    else:
        source = states
    rows = ablation_suite(tests, source, pipe, cfg["eval"]["jobs"])
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(ablation_markdown(rows), encoding="utf-8")
    doc = [{"toggles": r.toggles.__dict__, **r.report.to_dict(include_latency=True)}
           for r in rows]
    (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(ablation_markdown(rows), end="")
    return EXIT_OK


def cmd_sweep(cfg: dict, args: argparse.Namespace) -> int:
    histories, tests, titles = load_data(cfg)
    pipe = make_pipeline(cfg, titles)
    fractions = cfg["eval"]["fractions"]
    jobs = cfg["eval"]["jobs"]
    try:
        curve = history_sweep(fractions, tests, histories, pipe,
                              builder=lambda hs: _build_all(pipe, list(hs), jobs), jobs=jobs)
    except ValueError as exc:
        raise UsageError(f"[eval] fractions: {exc}") from exc
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_curve(out / "curve.csv", curve)
    for f, r in curve:
        print(f"{f:g}\t{r.map:.4f}")
    return EXIT_OK


def cmd_case(cfg: dict, args: argparse.Namespace) -> int:
    histories, tests, titles = load_data(cfg)
    states = load_states(cfg, histories)
    if args.user not in states:
        raise DataError(f"unknown user {args.user!r}")
    match = [t for t in tests if t.user_id == args.user and t.query == args.query]
    if match:
        tq = match[0]
    else:
        corpus = load_corpus(_require(cfg["paths"]["corpus"], "corpus"))
        tq = TestQuery(args.user, args.query, 0,
                       bm25_topk(list(corpus.values()), args.query, cfg["pipeline"]["candidate_k"]))
    if not tq.candidates:
        raise DataError("no candidate documents for the query")
    pipe = make_pipeline(cfg, titles)
    _, trace = pipe.handle_query(states[args.user], tq)
    ground = None
    if tq.relevant:
        ground = "; ".join(d.title or d.doc_id for d in tq.candidates if d.doc_id in tq.relevant)
    print(format_case(trace, ground), end="")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic corpus, log and manifest"),
    "ingest": (cmd_ingest, "parse the log, split it and generate candidates"),
    "build-memory": (cmd_build_memory, "build sensory and long-term memory per user"),
    "run": (cmd_run, "answer every test query and write rankings and traces"),
    "eval": (cmd_eval, "answer and score every test query"),
    "ablate": (cmd_ablate, "evaluate with each memory unit switched off in turn"),
    "sweep": (cmd_sweep, "evaluate over increasing history fractions"),
    "case": (cmd_case, "show the stage-by-stage trace of one query"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="users processed in parallel")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="ingested data directory")
    common.add_argument("--memory", help="memory store directory")
    common.add_argument("--rules", help="mock provider rules file")
    common.add_argument("--ranker", choices=("term", "llm", "vector", "pclick"))
    common.add_argument("--retrieval", choices=("llm", "lexical"))
    common.add_argument("--progressive", action="store_true",
                        help="fold test sessions into memory as they finish")
    common.add_argument("--trace-timings", action="store_true",
                        help="include per-stage latency in traces")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="cops", description="Memory-augmented personalized re-ranking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "synth":
            p.add_argument("--users", type=int)
            p.add_argument("--rho", type=float, help="re-finding rate")
            p.add_argument("--synth-out", help="directory for the generated files")
        if name == "ingest":
            p.add_argument("--log", help="seven-column TSV query log")
            p.add_argument("--corpus", help="JSONL corpus")
        if name == "case":
            p.add_argument("--user", required=True)
            p.add_argument("--query", required=True)
            p.add_argument("--corpus", help="JSONL corpus for unseen queries")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.set)
        _apply_flags(cfg, args)
        _check_eval(cfg)
        return func(cfg, args)
    except UsageError as exc:
        print(f"cops: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProviderError as exc:
        print(f"cops: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, LogFormatError, longterm.LongTermFormatError, InfeasibleConfig,
            TemplateError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cops: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
