import copy
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgmatch.embeddings import EmbeddedItem, HashEmbedder, compose_text, embed
from kgmatch.errors import ConfigurationError
from kgmatch.generation import MatchQuestion
from kgmatch.kg_store import INCOMING, OUTGOING, KGStore
from kgmatch.retrieval import (
    EntityPair,
    Hop,
    Path,
    RetrievalConfig,
    RetrievalContext,
    bfs_neighborhood,
    bfs_paths,
    entity_pairs,
    parse_subgraphs,
    paths_for_entities,
    retrieve_entities_llm,
    retrieve_entities_vector,
    retrieve_relations_vector,
    retrieve_subgraphs_llm,
    retrieve_triples_vector,
    run_strategy,
    triple_id,
)
from kgmatch.vector_index import build

import toydata


class CannedLLM:
    def __init__(self, text):
        self.text = text
        self.payloads = []

    def complete(self, payload):
        self.payloads.append(payload)
        return self.text


class TableProvider:
    """Maps known texts to fixed vectors; everything else gets the last basis vector."""

    def __init__(self, table, dim):
        self.table, self.dim = table, dim

    def embed_batch(self, texts):
        fallback = np.eye(self.dim)[-1]
        return [self.table.get(t, fallback) for t in texts]


def store_of(triples):
    s = KGStore()
    s.add_triples(triples)
    return s


def keys(paths):
    return {p.key() for p in paths}


# ------------------------------------------------------------ oracle

def dfs_oracle(triples, es, ed, d_max):
    """Independent enumeration: recursive DFS straight over the triple list."""
    found = set()

    def rec(node, hops, seen):
        if len(hops) == d_max:
            return
        for h, r, t in triples:
            for start, end, direction in ((h, t, OUTGOING), (t, h, INCOMING)):
                if start != node or end in seen:
                    continue
                nxt = hops + ((h, r, t, direction),)
                if end == ed:
                    found.add(nxt)
                else:
                    rec(end, nxt, seen | {end})

    rec(es, (), {es})
    return found


# --------------------------------------------------------- enumeration

def test_entity_pairs_examples():
    assert entity_pairs(["a", "b", "c"]) == [EntityPair("a", "b"), EntityPair("a", "c"), EntityPair("b", "c")]
    assert entity_pairs(["a"]) == []
    assert entity_pairs([]) == []
    with pytest.raises(ValueError):
        EntityPair("a", "a")


@given(st.lists(st.text(min_size=1, max_size=3), unique=True, max_size=12))
def test_entity_pairs_count(ents):
    assert len(entity_pairs(ents)) == len(ents) * (len(ents) - 1) // 2


CHAIN = [("A", "r", "B"), ("B", "r", "C"), ("C", "r", "D"), ("A", "s", "E"), ("E", "s", "D")]


def test_bfs_chain_example():
    paths = bfs_paths(store_of(CHAIN), EntityPair("A", "D"), 3, None)
    assert sorted(p.nodes for p in paths) == [["A", "B", "C", "D"], ["A", "E", "D"]]
    assert keys(paths) == dfs_oracle(CHAIN, "A", "D", 3)
    assert [len(p) for p in paths] == [2, 3]  # shortest first
    assert not paths.truncated


def test_bfs_disconnected_and_unknown():
    s = store_of([("A", "r", "B"), ("C", "r", "D")])
    assert bfs_paths(s, EntityPair("A", "D")) == []
    assert bfs_paths(s, EntityPair("A", "Z")) == []


def test_bfs_adjacent_includes_one_hop():
    paths = bfs_paths(store_of(CHAIN), EntityPair("B", "A"), 3, None)
    assert (("A", "r", "B", INCOMING),) in keys(paths)


def test_bfs_cap_sets_truncation():
    triples = [("s", f"r{i}", f"m{i}") for i in range(20)] + [(f"m{i}", "q", "t") for i in range(20)]
    paths = bfs_paths(store_of(triples), EntityPair("s", "t"), 3, 5)
    assert len(paths) == 5 and paths.truncated
    assert all(p.is_valid(3) for p in paths)


def test_bfs_rejects_bad_depth():
    with pytest.raises(ValueError):
        bfs_paths(store_of(CHAIN), EntityPair("A", "D"), 0)


graphs = st.lists(
    st.tuples(st.integers(0, 7), st.sampled_from(["r", "s", "t"]), st.integers(0, 7)),
    min_size=0,
    max_size=30,
)


@settings(max_examples=300, deadline=None)
@given(graphs, st.integers(0, 7), st.integers(0, 7), st.integers(1, 4))
def test_bfs_matches_dfs_oracle(edges, a, b, d_max):
    if a == b:
        return
    triples = sorted({(f"n{h}", r, f"n{t}") for h, r, t in edges})
    s = store_of(triples)
    got = bfs_paths(s, EntityPair(f"n{a}", f"n{b}"), d_max, None)
    assert keys(got) == dfs_oracle(triples, f"n{a}", f"n{b}", d_max)
    assert len(got) == len(keys(got))
    assert all(p.is_valid(d_max) and p.start == f"n{a}" and p.end == f"n{b}" for p in got)
    back = bfs_paths(s, EntityPair(f"n{b}", f"n{a}"), d_max, None)
    assert keys(p.reversed() for p in back) == keys(got)


def test_neighborhood_examples():
    assert bfs_neighborhood(store_of([("x", "r", "y")]), "lonely") == []
    star = store_of([("c", "r", "l1"), ("c", "r", "l2"), ("l3", "r", "c")])
    got = bfs_neighborhood(star, "c", 3)
    assert sorted(p.nodes for p in got) == [["c", "l1"], ["c", "l2"], ["c", "l3"]]
    chain = store_of([("e", "r", "n1"), ("n1", "r", "n2"), ("n2", "r", "n3"), ("n3", "r", "n4"), ("n4", "r", "n5")])
    got = bfs_neighborhood(chain, "e", 3)
    assert [p.nodes for p in got] == [["e", "n1", "n2", "n3"]]


@settings(max_examples=200, deadline=None)
@given(graphs, st.integers(0, 7), st.integers(1, 3))
def test_neighborhood_frontier_maximal(edges, root, d_max):
    triples = sorted({(f"n{h}", r, f"n{t}") for h, r, t in edges})
    s = store_of(triples)
    got = bfs_neighborhood(s, f"n{root}", d_max, None)
    ks = [p.key() for p in got]
    assert len(set(ks)) == len(ks)
    for p in got:
        assert p.is_valid(d_max) and p.start == f"n{root}"
        if len(p) < d_max:
            assert all(n in p.nodes for _, n, _ in s.neighbors(p.end))
    for a in ks:
        for b in ks:
            assert a == b or b[: len(a)] != a


def test_neighborhood_cap():
    star = store_of([("c", "r", f"l{i}") for i in range(10)])
    got = bfs_neighborhood(star, "c", 3, 4)
    assert len(got) == 4 and got.truncated


def test_path_validity_checks():
    good = Path((Hop("a", "r", "b"), Hop("c", "s", "b", INCOMING)))
    assert good.is_valid() and good.nodes == ["a", "b", "c"]
    assert not Path((Hop("a", "r", "b"), Hop("a", "s", "c"))).is_valid()
    assert not Path((Hop("a", "r", "b"), Hop("b", "s", "a"))).is_valid()
    assert not Path(()).is_valid()
    assert not good.is_valid(d_max=1)


# ----------------------------------------------------- vector retrieval

def _entity_index(store, provider):
    items = [EmbeddedItem(e.id, "entity", embed(compose_text(e), provider)) for e in store.entities() if e.label]
    return build(items, "exact")


def test_vector_retrieval_empty_index():
    idx = build([], "exact")
    assert retrieve_entities_vector(np.ones(3), idx, 5) == []
    assert retrieve_relations_vector(np.ones(3), idx, 5) == []
    assert retrieve_triples_vector(np.ones(3), idx, 5) == []


def test_entity_with_question_text_ranks_first():
    store = toydata.build_store()
    p = HashEmbedder(300)
    idx = _entity_index(store, p)
    target = store.lookup("Q39631")
    got = retrieve_entities_vector(compose_text(target), idx, 5, p)
    assert got[0] == "Q39631"


def test_orthogonal_entities_match_brute_force():
    basis = np.eye(5)
    table = {f"ent{i}": basis[i] for i in range(5)}
    p = TableProvider(table, 5)
    items = [EmbeddedItem(f"E{i}", "entity", embed(f"ent{i}", p)) for i in range(5)]
    q = np.array([0.1, 0.5, 0.2, 0.9, 0.3])
    q = q / np.linalg.norm(q)
    expect = [f"E{i}" for i in np.argsort(-(basis @ q), kind="stable")]
    assert retrieve_entities_vector(q, build(items), 5) == expect


def test_single_relation_regardless_of_k():
    p = HashEmbedder(16)
    idx = build([EmbeddedItem("P31", "relation", embed("instance of", p))])
    for k in (1, 5, 50):
        assert retrieve_relations_vector("anything at all", idx, k, p) == ["P31"]


def test_triple_identity_score_and_oracle():
    store = toydata.build_store()
    p = HashEmbedder(300)
    ts = store.sorted_triples()[:20]
    texts = [compose_text(t, store) for t in ts]
    items = [EmbeddedItem(triple_id(t.head, t.relation, t.tail), "triple", embed(x, p)) for t, x in zip(ts, texts)]
    idx = build(items, "exact")
    one = retrieve_triples_vector(texts[3], build(items[3:4]), 1, p)
    assert one[0].item_id == items[3].item_id and one[0].score == pytest.approx(1.0, abs=1e-6)
    q = embed("patient subclass of person", p)
    got = retrieve_triples_vector(q, idx, 10)
    scores = np.array([float(it.vector @ q) for it in items])
    oracle = sorted(range(20), key=lambda i: (-scores[i], items[i].item_id))[:10]
    assert [g.item_id for g in got] == [items[i].item_id for i in oracle]


# -------------------------------------------------------- LLM retrieval

def _labelled_store():
    return toydata.build_store()


def test_llm_entities_examples():
    store = _labelled_store()
    q = MatchQuestion("a-b", "c-d")
    assert retrieve_entities_llm(q, CannedLLM("physician (Q39631)"), store).entities == ["Q39631"]
    res = retrieve_entities_llm(q, CannedLLM("unobtainium"), store)
    assert (res.entities, res.dropped) == ([], 1)
    res = retrieve_entities_llm(q, CannedLLM(""), store)
    assert res.entities == [] and res.unparseable


def test_llm_entities_label_fallback_and_cap():
    store = _labelled_store()
    text = "1. patient (Q000)\n- Physician\nhospital, dose; nothing here"
    res = retrieve_entities_llm(MatchQuestion("a-b", "c-d"), CannedLLM(text), store, k=3)
    assert res.entities == ["Q181600", "Q39631", "Q16917"]
    assert res.dropped == 1


CASE = ("beneficiary (Q2596417), subclass of (Q21514624), customer (Q852835) → "
        "customer (Q852835), subclass of (Q21514624), patient (Q181600)")


def test_subgraph_case_study():
    paths = retrieve_subgraphs_llm(MatchQuestion("a-b", "c-d"), CannedLLM(CASE), _labelled_store())
    assert len(paths) == 1
    assert paths[0].nodes == ["Q2596417", "Q852835", "Q181600"]
    assert paths[0].relations == ["Q21514624", "Q21514624"]


def test_subgraph_prose_and_partial():
    store = _labelled_store()
    assert parse_subgraphs("These attributes look related to patients.", store)[0] == []
    text = "SA physical status classification system (Q297199), instance of (P31), medical classification (Q3518464) -> medical classification (Q3518464), has part (P527), unobtainium (Q0)"
    paths, dropped = parse_subgraphs(text, store)
    assert len(paths) == 1 and len(paths[0]) == 1 and dropped == 1


def test_subgraph_reverse_orientation_is_verified():
    paths, _ = parse_subgraphs("customer (Q852835), subclass of (Q21514624), beneficiary (Q2596417)", _labelled_store())
    assert paths[0].hops == (Hop("Q2596417", "Q21514624", "Q852835", INCOMING),)


# ------------------------------------------------------------- strategies

def _ctx(store, **kw):
    p = HashEmbedder(300)
    ent = _entity_index(store, p)
    rel = build([EmbeddedItem(r.id, "relation", embed(compose_text(r), p)) for r in store.relations()])
    tri = build([
        EmbeddedItem(triple_id(t.head, t.relation, t.tail), "triple", embed(compose_text(t, store), p))
        for t in store.sorted_triples()
    ])
    base = dict(store=store, provider=p, entity_index=ent, relation_index=rel, triple_index=tri)
    base.update(kw)
    return RetrievalContext(**base)


def test_missing_dependency_is_configuration_error():
    store = _labelled_store()
    with pytest.raises(ConfigurationError):
        run_strategy(MatchQuestion("a-b", "c-d"), "entity_llm_bfs", _ctx(store))
    with pytest.raises(ConfigurationError):
        run_strategy(MatchQuestion("a-b", "c-d"), "nope", _ctx(store))


def test_triple_vec_bounded_by_k():
    out = run_strategy(MatchQuestion("patient-id", "person-id"), "triple_vec", _ctx(_labelled_store()))
    assert 0 < len(out.triples) <= 10
    assert out.retrieval_time >= 0 and out.embed_time >= 0


def test_entity_vec_bfs_no_entities():
    store = _labelled_store()
    ctx = _ctx(store, entity_index=build([], "exact"))
    out = run_strategy(MatchQuestion("a-b", "c-d"), "entity_vec_bfs", ctx)
    assert out.entities == [] and out.paths == []


def test_entity_vec_bfs_is_composition_of_steps():
    store = _labelled_store()
    ctx = _ctx(store)
    q = MatchQuestion("person-person_id", "patients-subject_id", "identifier of a person", "patient identifier")
    out = run_strategy(q, "entity_vec_bfs", ctx)
    ents = retrieve_entities_vector(q, ctx.entity_index, 5, ctx.provider)
    assert out.entities == ents
    assert keys(out.paths) == keys(paths_for_entities(store, ents, RetrievalConfig(), "entity_vec_bfs"))
    if len(out.paths) > 1:
        assert out.relations == retrieve_relations_vector(q, ctx.relation_index, 5, ctx.provider)


def test_entity_llm_bfs_single_entity_uses_neighbourhood():
    store = _labelled_store()
    ctx = _ctx(store, llm=CannedLLM("physician (Q39631)"))
    out = run_strategy(MatchQuestion("a-b", "c-d"), "entity_llm_bfs", ctx)
    assert out.entities == ["Q39631"]
    assert keys(out.paths) == keys(bfs_neighborhood(store, "Q39631", 3, 100))


def test_subgraph_llm_strategy():
    store = _labelled_store()
    out = run_strategy(MatchQuestion("a-b", "c-d"), "subgraph_llm", _ctx(store, llm=CannedLLM(CASE)))
    assert len(out.paths) == 1 and out.entities == ["Q2596417", "Q852835", "Q181600"]


def test_run_strategy_does_not_mutate_store_or_indexes():
    store = _labelled_store()
    ctx = _ctx(store)
    before_store = pickle.dumps(store)
    before_vecs = copy.deepcopy(ctx.entity_index.vectors)
    for strategy in ("triple_vec", "entity_vec_bfs"):
        for row in toydata.QUESTIONS[:5]:
            run_strategy(MatchQuestion(*row[:4]), strategy, ctx)
    assert pickle.dumps(store) == before_store
    assert np.array_equal(ctx.entity_index.vectors, before_vecs)


def test_outcome_record_is_json_ready():
    import json

    out = run_strategy(MatchQuestion("patient-id", "person-id"), "triple_vec", _ctx(_labelled_store()))
    rec = json.loads(json.dumps(out.to_record()))
    assert rec["strategy"] == "triple_vec" and len(rec["paths"]) == len(out.triples)
