import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgmatch.embeddings import (
    EmbeddedItem,
    HashEmbedder,
    HttpEmbeddingProvider,
    compose_text,
    embed,
    embed_corpus,
    embed_texts,
    load_embeddings,
    normalize,
    stack,
    write_embeddings,
)
from kgmatch.errors import ConfigurationError, CorpusEmbeddingError, EmbeddingError, FormatError, TransportError
from kgmatch.generation import MatchQuestion
from kgmatch.kg_store import Entity, KGStore, Relation, Triple


class FixedProvider:
    """Returns canned vectors and counts calls."""

    def __init__(self, dim=4, fail_after=None):
        self.dim = dim
        self.calls = 0
        self.fail_after = fail_after

    def embed_batch(self, texts):
        if self.fail_after is not None and self.calls >= self.fail_after:
            raise TransportError("boom")
        self.calls += 1
        return [[1.0 + len(t), 2.0, 0.5, -1.0][: self.dim] + [0.0] * max(0, self.dim - 4) for t in texts]


def _case_store():
    store = KGStore()
    store.add_triples([("Q2596417", "P279", "Q852835")])
    store._entities["Q2596417"] = Entity("Q2596417", "beneficiary")
    store._entities["Q852835"] = Entity("Q852835", "customer")
    store._relations["P279"] = Relation("P279", "subclass of")
    return store


def test_compose_entity_and_relation():
    assert compose_text(Entity("Q39631", "physician")) == "physician"
    assert compose_text(Entity("Q39631", "physician", "medical doctor")) == "physician. medical doctor"
    assert compose_text(Relation("P31", "instance of")) == "instance of"


def test_compose_triple_case_study():
    assert compose_text(Triple("Q2596417", "P279", "Q852835"), _case_store()) == "beneficiary. subclass of. customer."


def test_compose_triple_without_labels_uses_ids():
    assert compose_text(Triple("Qa", "Pb", "Qc"), KGStore()) == "Qa. Pb. Qc."


def test_compose_question_contains_both_names():
    text = compose_text(MatchQuestion("date of death", "date of birth"))
    assert "date of death" in text and "date of birth" in text


def test_hash_embedder_deterministic_and_unit():
    p = HashEmbedder(300)
    a, b = embed("abc", p), embed("abc", p)
    assert np.array_equal(a, b)
    assert a.shape == (300,) and a.dtype == np.float32
    assert abs(np.linalg.norm(a) - 1) < 1e-6


def test_hash_embedder_shared_tokens_are_similar():
    p = HashEmbedder(300)
    a, b, c = embed_texts(["date of birth", "birth date", "hospital ward"], p)
    assert float(a @ b) > float(a @ c)


def test_dim_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        embed("x", FixedProvider(dim=768), dim=300)


def test_normalize_rejects_zero_and_nan():
    with pytest.raises(EmbeddingError):
        normalize([0.0, 0.0])
    with pytest.raises(EmbeddingError):
        normalize([np.nan, 1.0])


finite = arrays(np.float64, st.integers(1, 32), elements=st.floats(-1e6, 1e6, allow_nan=False))


@settings(max_examples=300, deadline=None)
@given(finite)
def test_normalize_idempotent_and_direction_preserving(v):
    if np.linalg.norm(v) < 1e-6:
        return
    n = normalize(v)
    assert np.allclose(normalize(n), n, atol=1e-9)
    cos = float(v @ n) / float(np.linalg.norm(v))
    assert abs(cos - 1) < 1e-6


def _items(n, kind="entity"):
    return [(f"id{i}", kind, f"text number {i}") for i in range(n)]


def test_embed_corpus_empty(tmp_path):
    res = embed_corpus([], HashEmbedder(8), tmp_path / "c.kgev", dim=8)
    assert res.count == 0
    assert load_embeddings(tmp_path / "c.kgev") == []


def test_embed_corpus_one_batch(tmp_path):
    p = FixedProvider()
    res = embed_corpus(_items(10), p, tmp_path / "c.kgev", batch_size=32)
    assert (p.calls, res.count, res.batches) == (1, 10, 1)


def test_embed_corpus_resumes(tmp_path):
    path = tmp_path / "c.kgev"
    p1 = FixedProvider(fail_after=3)
    with pytest.raises(CorpusEmbeddingError) as exc:
        embed_corpus(_items(10), p1, path, batch_size=2)
    assert exc.value.completed == 6
    p2 = FixedProvider()
    res = embed_corpus(_items(10), p2, path, batch_size=1)
    assert p2.calls == 4
    assert res.count == 10
    assert [it.item_id for it in load_embeddings(path)] == [f"id{i}" for i in range(10)]


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    items = [
        EmbeddedItem(f"e{i}", kind, normalize(rng.normal(size=16)).astype(np.float32))
        for i, kind in enumerate(["entity", "relation", "triple", "question"] * 3)
    ]
    write_embeddings(tmp_path / "x.kgev", items)
    assert load_embeddings(tmp_path / "x.kgev") == items


def test_missing_file():
    with pytest.raises(OSError):
        load_embeddings("/nonexistent/file.kgev")


def test_truncated_record_names_last_valid_index(tmp_path):
    path = tmp_path / "c.kgev"
    embed_corpus(_items(3), HashEmbedder(8), path, dim=8)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError, match="last valid record index is 1"):
        load_embeddings(path)


def test_torn_tail_is_repaired_on_resume(tmp_path):
    path = tmp_path / "c.kgev"
    embed_corpus(_items(3), HashEmbedder(8), path, dim=8)
    path.write_bytes(path.read_bytes()[:-5])
    res = embed_corpus(_items(3), HashEmbedder(8), path, dim=8)
    assert res.written == 1 and res.count == 3
    assert len(load_embeddings(path)) == 3


def test_stack_rejects_mixed_dims():
    items = [EmbeddedItem("a", "entity", np.ones(2, np.float32)), EmbeddedItem("b", "entity", np.ones(3, np.float32))]
    with pytest.raises(ConfigurationError):
        stack(items)


def test_http_provider_contract():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body)
        return httpx.Response(200, json={"embeddings": [[1.0, 0.0, 0.0]] * len(body["texts"])})

    p = HttpEmbeddingProvider("http://embed.test/v1", "m", 3, client=httpx.Client(transport=httpx.MockTransport(handler)))
    out = embed_texts(["a", "b"], p)
    assert out.shape == (2, 3)
    assert seen == [{"texts": ["a", "b"], "model": "m"}]


def test_http_provider_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    p = HttpEmbeddingProvider("http://embed.test", "m", 3, retries=2, backoff=0,
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(TransportError):
        p.embed_batch(["a"])
    assert len(calls) == 3


def test_http_provider_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad")

    p = HttpEmbeddingProvider("http://embed.test", "m", 3, backoff=0,
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(EmbeddingError):
        p.embed_batch(["a"])
    assert len(calls) == 1
