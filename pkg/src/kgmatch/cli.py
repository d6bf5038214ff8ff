"""Command-line entry point: ``kgmatch {ingest,embed,index,retrieve,match,eval}``.

Artifacts live under ``paths.work_dir``::

    store.pkl                      ingested KG
    entities.kgev relations.kgev triples.kgev   embedding collections
    entities.npz  relations.npz  triples.npz    vector indexes
"""

from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
from pathlib import Path

from . import config as cfgmod
from .config import AppConfig
from .embeddings import HashEmbedder, HttpEmbeddingProvider, compose_text, embed_corpus, load_embeddings
from .errors import ConfigurationError, KGMatchError, PrerequisiteError
from .evaluation import Pipeline, compute_metrics, load_dataset, report, run_eval
from .generation import MatchQuestion, PromptTemplates, SamplingParams
from .kg_store import KGStore
from .llm import HttpChatClient, LLMClient, ReplayStore
from .retrieval import STRATEGIES, RetrievalConfig, RetrievalContext, run_strategy, triple_id
from .vector_index import HnswParams, build, load_index, save_index

logger = logging.getLogger("kgmatch")

COLLECTIONS = ("entities", "relations", "triples")


# --------------------------------------------------------------- artifacts

def work_dir(cfg: AppConfig) -> Path:
    return Path(cfg.paths.work_dir)


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{path} is missing; run `{command}` first")
    return path


def load_store(cfg: AppConfig) -> KGStore:
    with _need(work_dir(cfg) / "store.pkl", "ingest").open("rb") as fh:
        return pickle.load(fh)


def make_provider(cfg: AppConfig):
    e = cfg.embedding
    if e.provider == "hash":
        return HashEmbedder(e.dim, e.seed)
    return HttpEmbeddingProvider(e.url, e.model, e.dim, api_key_env=e.api_key_env)


def make_llm(cfg: AppConfig) -> LLMClient:
    c = cfg.llm
    live = None
    if c.mode in ("live", "record"):
        live = HttpChatClient(
            c.endpoint, c.model, api_key_env=c.api_key_env, timeout=c.timeout, retries=c.retries,
            backoff=c.backoff, rate_limit=c.rate_limit or None, send_top_k=c.send_top_k,
        )
    store = None
    if c.mode in ("record", "replay"):
        path = Path(cfg.paths.replay_store) if cfg.paths.replay_store else work_dir(cfg) / "replay.jsonl"
        if c.mode == "replay" and not path.exists():
            raise PrerequisiteError(f"replay store {path} is missing; run with --replay record first")
        store = ReplayStore(path)
    return LLMClient(c.mode, c.model, live=live, store=store)


def make_context(cfg: AppConfig, strategy: str) -> RetrievalContext:
    store = load_store(cfg)
    wd = work_dir(cfg)
    wanted = {
        "triple_vec": ("triples", "relations"),
        "entity_vec_bfs": ("entities", "relations"),
        "entity_llm_bfs": ("relations",),
        "subgraph_llm": ("relations",),
    }[strategy]
    indexes = {name: load_index(_need(wd / f"{name}.npz", "index")) for name in wanted}
    templates = PromptTemplates.load(cfg.paths.templates or None)
    llm = make_llm(cfg) if strategy in ("entity_llm_bfs", "subgraph_llm") else None
    return RetrievalContext(
        store=store,
        provider=make_provider(cfg),
        entity_index=indexes.get("entities"),
        relation_index=indexes.get("relations"),
        triple_index=indexes.get("triples"),
        llm=llm,
        templates=templates,
        config=RetrievalConfig(**cfg.retrieval.__dict__),
    )


def make_pipeline(cfg: AppConfig) -> Pipeline:
    ctx = make_context(cfg, cfg.strategy)
    llm = ctx.llm or make_llm(cfg)
    ctx.llm = ctx.llm or llm
    scheme = None if cfg.ranking.scheme == "auto" else cfg.ranking.scheme
    return Pipeline(ctx, llm, cfg.strategy, scheme, cfg.ranking.top, ctx.templates, SamplingParams(**cfg.sampling.__dict__))


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg: AppConfig, args) -> int:
    p = cfg.paths
    if not p.kg_triples:
        raise ConfigurationError("paths.kg_triples is required for ingest")
    store = KGStore()
    rep = store.ingest_triples(p.kg_triples)
    print(f"triples: loaded={rep.loaded} skipped={rep.skipped}")
    if p.entity_labels or p.relation_labels:
        rep = store.ingest_labels(p.entity_labels or None, p.relation_labels or None)
        print(f"labels: loaded={rep.loaded} merged={rep.merged} skipped={rep.skipped}")
    if p.entity_descriptions:
        store.ingest_descriptions(p.entity_descriptions, "entity")
    if p.relation_descriptions:
        store.ingest_descriptions(p.relation_descriptions, "relation")
    wd = work_dir(cfg)
    wd.mkdir(parents=True, exist_ok=True)
    with (wd / "store.pkl").open("wb") as fh:
        pickle.dump(store, fh, protocol=pickle.HIGHEST_PROTOCOL)
    s = store.stats()
    print(f"entities={s.entity_count} relations={s.relation_count} triples={s.triple_count} max_degree={s.max_degree}")
    return 0


def corpus_items(store: KGStore, name: str):
    if name == "entities":
        # triple-only stubs have no text worth embedding beyond their id
        return ((e.id, "entity", compose_text(e)) for e in store.entities() if e.label)
    if name == "relations":
        return ((r.id, "relation", compose_text(r, store)) for r in store.relations())
    return ((triple_id(t.head, t.relation, t.tail), "triple", compose_text(t, store)) for t in store.sorted_triples())


def cmd_embed(cfg: AppConfig, args) -> int:
    store = load_store(cfg)
    provider = make_provider(cfg)
    for name in COLLECTIONS:
        res = embed_corpus(
            corpus_items(store, name), provider, work_dir(cfg) / f"{name}.kgev",
            cfg.embedding.batch_size, dim=cfg.embedding.dim, workers=cfg.workers,
        )
        print(f"{name}: {res.count} vectors ({res.written} new)")
    return 0


def cmd_index(cfg: AppConfig, args) -> int:
    wd = work_dir(cfg)
    params = HnswParams(cfg.index.m, cfg.index.ef_construction, cfg.index.ef_search)
    for name in COLLECTIONS:
        items = load_embeddings(_need(wd / f"{name}.kgev", "embed"))
        idx = build(items, cfg.index.mode, params, seed=cfg.seed)
        save_index(idx, wd / f"{name}.npz")
        print(f"{name}: {cfg.index.mode} index over {len(idx)} vectors")
    return 0


def _dataset(cfg: AppConfig):
    if not cfg.paths.dataset:
        raise ConfigurationError("paths.dataset is required")
    return load_dataset(cfg.paths.dataset)


def cmd_retrieve(cfg: AppConfig, args) -> int:
    questions = _dataset(cfg)
    ctx = make_context(cfg, cfg.strategy)
    if ctx.llm is None and cfg.strategy in ("entity_llm_bfs", "subgraph_llm"):
        ctx.llm = make_llm(cfg)
    out = Path(args.out or work_dir(cfg) / "retrieval")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "retrieval.jsonl").open("w", encoding="utf-8") as fh, \
            (out / "retrieval_timings.jsonl").open("w", encoding="utf-8") as th:
        for q in questions:
            o = run_strategy(q, cfg.strategy, ctx)
            fh.write(json.dumps(o.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
            th.write(json.dumps({"question_id": o.question_id, "embed_s": o.embed_time,
                                 "retrieval_s": o.retrieval_time}) + "\n")
    print(f"retrieved context for {len(questions)} questions into {out}")
    return 0


def cmd_match(cfg: AppConfig, args) -> int:
    q = MatchQuestion(args.q1, args.q2, args.d1 or "", args.d2 or "", None, "cli")
    rec = make_pipeline(cfg).answer(q)
    print(json.dumps({**rec.result_dict(), "question": q.text()}, ensure_ascii=False, indent=2))
    return 1 if rec.failed else 0


def cmd_eval(cfg: AppConfig, args) -> int:
    questions = _dataset(cfg)
    pipeline = make_pipeline(cfg)
    out = Path(args.out or work_dir(cfg) / "eval")
    records = run_eval(questions, pipeline, out / "run.jsonl", workers=cfg.workers)
    metrics = compute_metrics(records)
    report(records, metrics, out, cfg.to_dict(), cfg.digest())
    shown = metrics.reported()
    failed = sum(r.failed for r in records)
    print(f"P={shown['precision']:.2f} R={shown['recall']:.2f} F1={shown['f1']:.2f} "
          f"(n={len(records)}, failed={failed}) -> {out}")
    return 1 if failed else 0


COMMANDS = {
    "ingest": cmd_ingest,
    "embed": cmd_embed,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "match": cmd_match,
    "eval": cmd_eval,
}


# ------------------------------------------------------------------ parser

def _config_help() -> str:
    lines = ["config keys (JSON file given with --config; defaults shown):"]
    for key, value in cfgmod.iter_defaults():
        lines.append(f"  {key} = {json.dumps(value)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--strategy", choices=STRATEGIES, help="overrides strategy")
    common.add_argument("--top", help="overrides ranking.top: 1, 2 or all")
    common.add_argument("--scheme", choices=("frequency", "normalized", "similarity", "auto"),
                        help="overrides ranking.scheme")
    common.add_argument("--replay", choices=("record", "replay", "live"), help="overrides llm.mode")
    common.add_argument("--seed", type=int, help="overrides seed")
    common.add_argument("--out", help="output directory for retrieve/eval")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="kgmatch",
        description="Knowledge-graph retrieval-augmented schema matching.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "match":
            p.add_argument("--q1", required=True, help="source attribute name")
            p.add_argument("--q2", required=True, help="target attribute name")
            p.add_argument("--d1", help="source attribute description")
            p.add_argument("--d2", help="target attribute description")
    return parser


def resolve_config(args) -> AppConfig:
    cfg = cfgmod.load_config(args.config)
    if args.strategy:
        cfg.strategy = args.strategy
    if args.top:
        cfg.ranking.top = args.top
    if args.scheme:
        cfg.ranking.scheme = args.scheme
    if args.replay:
        cfg.llm.mode = args.replay
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except KGMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
