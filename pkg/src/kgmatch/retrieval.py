"""Subgraph retrieval: vector lookups, bounded path enumeration and LLM retrievers.

Edges are walked in either direction. A :class:`Hop` always stores the
triple as it exists in the store (``head, relation, tail``) together with
the direction it was walked in, so ``start``/``end`` give the traversal
order while verbalisation can still show the real fact.
"""

from __future__ import annotations

import itertools
import logging
import re
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .embeddings import embed
from .errors import ConfigurationError
from .generation import MatchQuestion, PromptTemplates, build_prompt
from .kg_store import INCOMING, OUTGOING, KGStore
from .vector_index import ScoredItem

logger = logging.getLogger(__name__)

STRATEGIES = ("triple_vec", "entity_vec_bfs", "entity_llm_bfs", "subgraph_llm")
TRIPLE_SEP = "|"


# ------------------------------------------------------------------- types

@dataclass(frozen=True, slots=True)
class Hop:
    head: str
    relation: str
    tail: str
    direction: str = OUTGOING

    @property
    def start(self) -> str:
        return self.head if self.direction == OUTGOING else self.tail

    @property
    def end(self) -> str:
        return self.tail if self.direction == OUTGOING else self.head

    def flipped(self) -> Hop:
        return Hop(self.head, self.relation, self.tail, INCOMING if self.direction == OUTGOING else OUTGOING)

    def key(self) -> tuple[str, str, str, str]:
        return (self.head, self.relation, self.tail, self.direction)


@dataclass(frozen=True)
class Path:
    hops: tuple[Hop, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.hops)

    @property
    def start(self) -> str:
        return self.hops[0].start

    @property
    def end(self) -> str:
        return self.hops[-1].end

    @property
    def nodes(self) -> list[str]:
        return [self.hops[0].start] + [h.end for h in self.hops]

    @property
    def relations(self) -> list[str]:
        return [h.relation for h in self.hops]

    def key(self) -> tuple:
        return tuple(h.key() for h in self.hops)

    def reversed(self) -> Path:
        return Path(tuple(h.flipped() for h in reversed(self.hops)), self.source)

    def is_valid(self, d_max: int | None = None) -> bool:
        """Chaining, simplicity and length checks."""
        if not self.hops or (d_max is not None and len(self.hops) > d_max):
            return False
        if any(a.end != b.start for a, b in zip(self.hops, self.hops[1:])):
            return False
        nodes = self.nodes
        return len(set(nodes)) == len(nodes)


class PathSet(list):
    """A list of paths that remembers whether enumeration hit the cap."""

    def __init__(self, paths: Iterable[Path] = (), truncated: bool = False):
        super().__init__(paths)
        self.truncated = truncated


@dataclass(frozen=True)
class EntityPair:
    es: str
    ed: str

    def __post_init__(self):
        if self.es == self.ed:
            raise ValueError("entity pair endpoints must differ")


@dataclass(frozen=True)
class RetrievalConfig:
    d_max: int = 3
    k_entities: int = 5
    k_relations: int = 5
    k_triples: int = 10
    path_cap: int = 100

    def __post_init__(self):
        for name in ("d_max", "k_entities", "k_relations", "k_triples", "path_cap"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"retrieval.{name} must be >= 1")


@dataclass
class RetrievalOutcome:
    question_id: str
    strategy: str
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    paths: list[Path] = field(default_factory=list)
    triples: list[ScoredItem] = field(default_factory=list)
    retrieval_time: float = 0.0
    embed_time: float = 0.0
    truncated: bool = False
    dropped: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "strategy": self.strategy,
            "entities": list(self.entities),
            "relations": list(self.relations),
            "paths": [[list(h.key()) for h in p.hops] for p in self.paths],
            "triples": [[t.item_id, t.score] for t in self.triples],
            "truncated": self.truncated,
            "dropped": self.dropped,
            "warnings": list(self.warnings),
        }


def triple_id(head: str, relation: str, tail: str) -> str:
    return TRIPLE_SEP.join((head, relation, tail))


def split_triple_id(item_id: str) -> tuple[str, str, str]:
    parts = item_id.split(TRIPLE_SEP)
    if len(parts) != 3:
        raise ValueError(f"not a triple id: {item_id!r}")
    return parts[0], parts[1], parts[2]


def triple_path(item: ScoredItem | str, source: str = "triple_vec") -> Path:
    ident = item.item_id if isinstance(item, ScoredItem) else item
    h, r, t = split_triple_id(ident)
    return Path((Hop(h, r, t, OUTGOING),), source)


# ---------------------------------------------------------- vector lookups

def question_vector(question, provider) -> np.ndarray:
    """Accepts a MatchQuestion, raw text, or an already embedded vector."""
    if isinstance(question, np.ndarray):
        return question
    if provider is None:
        raise ConfigurationError("an embedding provider is needed to embed the question")
    text = question.text() if isinstance(question, MatchQuestion) else str(question)
    return embed(text, provider)


def _top(index, qvec, k: int) -> list[ScoredItem]:
    if index is None or len(index) == 0:
        return []
    return index.search(qvec, k)


def retrieve_entities_vector(question, entity_index, k: int, provider=None) -> list[str]:
    if entity_index is None or len(entity_index) == 0:
        return []
    return [s.item_id for s in _top(entity_index, question_vector(question, provider), k)]


def retrieve_relations_vector(question, relation_index, k: int, provider=None) -> list[str]:
    if relation_index is None or len(relation_index) == 0:
        return []
    return [s.item_id for s in _top(relation_index, question_vector(question, provider), k)]


def retrieve_triples_vector(question, triple_index, k: int, provider=None) -> list[ScoredItem]:
    if triple_index is None or len(triple_index) == 0:
        return []
    return _top(triple_index, question_vector(question, provider), k)


# ------------------------------------------------------------ enumeration

def entity_pairs(entities: Sequence[str]) -> list[EntityPair]:
    uniq = list(dict.fromkeys(entities))
    return [EntityPair(a, b) for a, b in itertools.combinations(uniq, 2)]


def _walk(store: KGStore, node: str):
    """(hop, next_node) for every edge incident to ``node``."""
    for rel, nbr, direction in store.iter_neighbors(node):
        if direction == OUTGOING:
            yield Hop(node, rel, nbr, OUTGOING), nbr
        else:
            yield Hop(nbr, rel, node, INCOMING), nbr


def _distances(store: KGStore, root: str, depth: int) -> dict[str, int]:
    dist = {root: 0}
    frontier = [root]
    for level in range(1, depth + 1):
        nxt = []
        for u in frontier:
            for _, v, _ in store.iter_neighbors(u):
                if v not in dist:
                    dist[v] = level
                    nxt.append(v)
        frontier = nxt
        if not frontier:
            break
    return dist


def bfs_paths(
    store: KGStore, pair: EntityPair, d_max: int = 3, path_cap: int | None = 100, source: str = "bfs"
) -> PathSet:
    """All simple paths from ``pair.es`` to ``pair.ed`` with at most ``d_max`` hops.

    Partial paths are extended level by level, so shorter paths come out
    first and a cap keeps the shortest ones. Extensions that cannot reach
    ``ed`` within the remaining hop budget are pruned using a distance map
    computed backwards from ``ed``.
    """
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    es, ed = pair.es, pair.ed
    out = PathSet()
    if not store.has_entity(es) or not store.has_entity(ed):
        return out
    dist = _distances(store, ed, d_max - 1)
    queue = deque([(es, (), (es,))])
    while queue:
        node, hops, seen = queue.popleft()
        remaining = d_max - len(hops) - 1  # hops left after the next one
        for hop, nbr in _walk(store, node):
            if nbr in seen:
                continue
            if nbr == ed:
                out.append(Path(hops + (hop,), source))
                if path_cap is not None and len(out) >= path_cap:
                    out.truncated = True
                    return out
            elif remaining > 0 and dist.get(nbr, d_max) <= remaining:
                queue.append((nbr, hops + (hop,), seen + (nbr,)))
    return out


def bfs_neighborhood(
    store: KGStore, entity: str, d_max: int = 3, path_cap: int | None = 100, source: str = "bfs"
) -> PathSet:
    """Frontier-maximal simple paths rooted at ``entity``.

    A path is returned when it has ``d_max`` hops or its last node has no
    unvisited neighbour, so no returned path is a prefix of another.
    Depth-first, which keeps memory flat around hub entities.
    """
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    out = PathSet()
    if not store.has_entity(entity):
        return out
    stack = [(entity, (), (entity,))]
    while stack:
        node, hops, seen = stack.pop()
        if len(hops) == d_max:
            out.append(Path(hops, source))
        else:
            ext = [(hop, nbr) for hop, nbr in _walk(store, node) if nbr not in seen]
            if not ext:
                if hops:
                    out.append(Path(hops, source))
            else:
                for hop, nbr in reversed(ext):
                    stack.append((nbr, hops + (hop,), seen + (nbr,)))
                continue
        if path_cap is not None and len(out) >= path_cap:
            out.truncated = bool(stack)
            return out
    return out


def paths_for_entities(store: KGStore, entities: Sequence[str], cfg: RetrievalConfig, source: str) -> PathSet:
    """No entities: nothing. One: its neighbourhood. Several: paths between every pair."""
    uniq = list(dict.fromkeys(entities))
    if not uniq:
        return PathSet()
    if len(uniq) == 1:
        return bfs_neighborhood(store, uniq[0], cfg.d_max, cfg.path_cap, source)
    out = PathSet()
    for pair in entity_pairs(uniq):
        found = bfs_paths(store, pair, cfg.d_max, cfg.path_cap, source)
        out.extend(found)
        out.truncated = out.truncated or found.truncated
    return out


# ---------------------------------------------------------- LLM retrievers

_LABELLED = re.compile(r"([^,;()\n]*?)\s*\(\s*([A-Za-z]\d+)\s*\)")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


@dataclass
class LLMEntityResult:
    entities: list[str]
    dropped: int = 0
    unparseable: bool = False
    raw_text: str = ""


def parse_entity_candidates(raw: str) -> list[tuple[str, str | None]]:
    """(label, id-or-None) candidates from retriever output."""
    cands: list[tuple[str, str | None]] = []
    for line in raw.splitlines():
        line = _BULLET.sub("", line).strip()
        if not line:
            continue
        found = _LABELLED.findall(line)
        if found:
            cands.extend((lab.strip(), qid) for lab, qid in found)
            continue
        for piece in re.split(r"[,;]", line):
            piece = piece.strip().strip("\"'`.")
            if piece:
                cands.append((piece, None))
    return cands


def verify_entities(store: KGStore, cands: Iterable[tuple[str, str | None]], k: int | None = None) -> tuple[list[str], int]:
    """Keep candidates whose id exists, or whose label resolves; count the rest as dropped."""
    kept: list[str] = []
    dropped = 0
    for label, qid in cands:
        ident = None
        if qid and store.has_entity(qid):
            ident = qid
        elif label:
            ids = store.resolve_label(label)
            ident = ids[0] if ids else None
        if ident is None:
            dropped += 1
        elif ident not in kept:
            kept.append(ident)
    if k is not None:
        kept = kept[:k]
    return kept, dropped


def retrieve_entities_llm(
    question: MatchQuestion, llm, store: KGStore, templates: PromptTemplates | None = None, k: int | None = None
) -> LLMEntityResult:
    raw = llm.complete(build_prompt("entity_retriever", question, templates=templates))
    cands = parse_entity_candidates(raw)
    if not cands:
        logger.warning("entity retriever output had no candidates")
        return LLMEntityResult([], 0, True, raw)
    kept, dropped = verify_entities(store, cands, k)
    return LLMEntityResult(kept, dropped, False, raw)


_ITEM = r"\s*(.+?)\s*\(\s*([^()]+?)\s*\)\s*"
_HOP_TEXT = re.compile(rf"^{_ITEM},{_ITEM},{_ITEM}$")
_ARROW = re.compile(r"\s*(?:→|->)\s*")


def _resolve(store: KGStore, label: str, ident: str, kind: str) -> str | None:
    if kind == "entity":
        if store.has_entity(ident):
            return ident
        ids = store.resolve_label(label)
    else:
        if store.has_relation(ident):
            return ident
        ids = store.resolve_relation_label(label)
    return ids[0] if ids else None


def _verify_hop(store: KGStore, text: str) -> Hop | None:
    m = _HOP_TEXT.match(_BULLET.sub("", text).strip())
    if not m:
        return None
    hl, hid, rl, rid, tl, tid = m.groups()
    h = _resolve(store, hl, hid, "entity")
    r = _resolve(store, rl, rid, "relation")
    t = _resolve(store, tl, tid, "entity")
    if h is None or r is None or t is None:
        return None
    if store.has_triple(h, r, t):
        return Hop(h, r, t, OUTGOING)
    if store.has_triple(t, r, h):
        return Hop(t, r, h, INCOMING)
    return None


def parse_subgraphs(raw: str, store: KGStore, d_max: int = 3, source: str = "subgraph_llm") -> tuple[list[Path], int]:
    """Verified paths from arrow-separated hop text, plus the number of dropped hops.

    Surviving hops on a line are grouped into runs that chain, stay simple
    and respect ``d_max``; a break in any of those starts a new path.
    """
    paths: list[Path] = []
    seen_keys = set()
    dropped = 0
    for line in raw.splitlines():
        if not line.strip():
            continue
        segments = [s for s in _ARROW.split(line.strip()) if s.strip()]
        run: list[Hop] = []
        runs: list[list[Hop]] = []
        for seg in segments:
            hop = _verify_hop(store, seg)
            if hop is None:
                if _HOP_TEXT.match(_BULLET.sub("", seg).strip()):
                    dropped += 1
                if run:
                    runs.append(run)
                    run = []
                continue
            if hop.start == hop.end:
                dropped += 1
                continue
            nodes = [run[0].start] + [h.end for h in run] if run else []
            if run and (hop.start != run[-1].end or hop.end in nodes or len(run) >= d_max):
                runs.append(run)
                run = []
            run.append(hop)
        if run:
            runs.append(run)
        for r in runs:
            p = Path(tuple(r), source)
            if p.key() not in seen_keys:
                seen_keys.add(p.key())
                paths.append(p)
    return paths, dropped


def retrieve_subgraphs_llm(
    question: MatchQuestion, llm, store: KGStore, templates: PromptTemplates | None = None, d_max: int = 3
) -> list[Path]:
    raw = llm.complete(build_prompt("subgraph_retriever", question, templates=templates))
    paths, dropped = parse_subgraphs(raw, store, d_max)
    if dropped:
        logger.debug("dropped %d unverifiable hops from subgraph retriever output", dropped)
    return paths


# ---------------------------------------------------------------- strategy

@dataclass
class RetrievalContext:
    store: KGStore
    provider: object = None
    entity_index: object = None
    relation_index: object = None
    triple_index: object = None
    llm: object = None
    templates: PromptTemplates | None = None
    config: RetrievalConfig = field(default_factory=RetrievalConfig)


_NEEDS: dict[str, tuple[str, ...]] = {
    "triple_vec": ("provider", "triple_index"),
    "entity_vec_bfs": ("provider", "entity_index", "relation_index"),
    "entity_llm_bfs": ("llm", "provider", "relation_index"),
    "subgraph_llm": ("llm", "provider", "relation_index"),
}


def check_context(strategy: str, ctx: RetrievalContext) -> None:
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    missing = [name for name in _NEEDS[strategy] if getattr(ctx, name) is None]
    if missing:
        raise ConfigurationError(f"strategy {strategy} needs: {', '.join(missing)}")


def run_strategy(question: MatchQuestion, strategy: str, ctx: RetrievalContext) -> RetrievalOutcome:
    """Retrieve context for one question.

    For the entity strategies: entities, then pair or neighbourhood
    enumeration, then top relations whenever more than one path needs
    ranking. Ranking itself is left to the caller.
    """
    check_context(strategy, ctx)
    cfg = ctx.config
    out = RetrievalOutcome(question.question_id, strategy)
    t0 = time.perf_counter()
    qvec: np.ndarray | None = None
    embed_time = 0.0

    def qv() -> np.ndarray:
        nonlocal qvec, embed_time
        if qvec is None:
            e0 = time.perf_counter()
            qvec = question_vector(question, ctx.provider)
            embed_time += time.perf_counter() - e0
        return qvec

    if strategy == "triple_vec":
        out.triples = retrieve_triples_vector(qv(), ctx.triple_index, cfg.k_triples)
        out.paths = [triple_path(t) for t in out.triples]
    else:
        if strategy == "entity_vec_bfs":
            out.entities = retrieve_entities_vector(qv(), ctx.entity_index, cfg.k_entities)
            paths = paths_for_entities(ctx.store, out.entities, cfg, strategy)
        elif strategy == "entity_llm_bfs":
            res = retrieve_entities_llm(question, ctx.llm, ctx.store, ctx.templates, cfg.k_entities)
            out.entities, out.dropped = res.entities, res.dropped
            if res.unparseable:
                out.warnings.append("entity retriever output unparseable")
            paths = paths_for_entities(ctx.store, out.entities, cfg, strategy)
        else:
            raw = ctx.llm.complete(build_prompt("subgraph_retriever", question, templates=ctx.templates))
            found, out.dropped = parse_subgraphs(raw, ctx.store, cfg.d_max, strategy)
            paths = PathSet(found)
            out.entities = list(dict.fromkeys(n for p in found for n in p.nodes))
        out.paths = list(paths)
        out.truncated = getattr(paths, "truncated", False)
    if len(out.paths) > 1 and ctx.relation_index is not None:
        out.relations = retrieve_relations_vector(qv(), ctx.relation_index, cfg.k_relations)
    total = time.perf_counter() - t0
    out.embed_time = embed_time
    out.retrieval_time = max(total - embed_time, 0.0)
    return out

