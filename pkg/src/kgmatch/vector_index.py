"""Top-k cosine search: an exact flat index and an HNSW graph index.

Both indexes store unit-normalised float32 rows, so cosine similarity is a
plain dot product. Results are ordered by score descending with ties broken
by ``item_id`` ascending.

HNSW layout
-----------
Levels are drawn up-front from a seeded RNG and nodes are inserted in order
of decreasing level (stable within a level). Because of that ordering the
nodes present on layer ``l >= 1`` are exactly the internal rows
``0 .. count(level >= l) - 1``, which lets every layer live in a dense
``(rows, M)`` int32 array without an id map. Row 0 holds the top-level
entry point for the whole build.
"""

from __future__ import annotations

import heapq
import json
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numba import njit

from .embeddings import EmbeddedItem, stack
from .errors import ConfigurationError, EmbeddingError, FormatError

INDEX_FORMAT_VERSION = 1
_MAX_LEVEL = 16


@dataclass(frozen=True)
class ScoredItem:
    item_id: str
    kind: str
    score: float


@dataclass(frozen=True)
class HnswParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 600

    def __post_init__(self):
        for name in ("m", "ef_construction", "ef_search"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"HnswParams.{name} must be > 0")


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine is undefined for a zero vector")
    return float(a @ b / (na * nb))


def _prepare_query(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float32).ravel()
    if q.shape[0] != dim:
        raise EmbeddingError(f"query has dim {q.shape[0]}, index dim is {dim}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0 or not math.isfinite(norm):
        raise EmbeddingError("query vector must be finite and nonzero")
    return (q / norm).astype(np.float32)


def _ordered(ids: Sequence[str], kinds: Sequence[str], rows: np.ndarray, scores: np.ndarray, k: int):
    if len(rows) > k:
        # keep the top k plus anything tied with the k-th score
        kth = np.partition(scores, len(scores) - k)[len(scores) - k]
        keep = np.flatnonzero(scores >= kth)
        rows, scores = rows[keep], scores[keep]
    order = sorted(range(len(rows)), key=lambda j: (-float(scores[j]), ids[rows[j]]))
    return [ScoredItem(ids[rows[j]], kinds[rows[j]], float(scores[j])) for j in order[:k]]


class _IndexBase:
    mode: str

    def __init__(self, ids: list[str], kinds: list[str], vectors: np.ndarray):
        self.ids = ids
        self.kinds = kinds
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 else 0


class ExactIndex(_IndexBase):
    """Flat brute-force index; the reference for recall measurements."""

    mode = "exact"

    def search(self, query, k: int) -> list[ScoredItem]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.ids:
            return []
        q = _prepare_query(query, self.dim)
        scores = self.vectors @ q
        n = scores.shape[0]
        return _ordered(self.ids, self.kinds, np.arange(n), scores, k)


# ------------------------------------------------------------------ kernels

@njit(cache=True)
def _search_layer(vecs, q, links, cnt, entries, ef, visited, tag):
    """Best-first search on one layer; returns (rows, sims) sorted by sim desc."""
    cand = [(np.float32(0.0), np.int64(0))]
    cand.pop()
    res = [(np.float32(0.0), np.int64(0))]
    res.pop()
    for e in entries:
        if visited[e] == tag:
            continue
        visited[e] = tag
        s = np.float32(np.dot(vecs[e], q))
        heapq.heappush(cand, (-s, np.int64(e)))
        heapq.heappush(res, (s, np.int64(e)))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        neg, c = heapq.heappop(cand)
        if len(res) >= ef and -neg < res[0][0]:
            break
        for j in range(cnt[c]):
            nb = links[c, j]
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            s = np.float32(np.dot(vecs[nb], q))
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, np.int64(nb)))
                heapq.heappush(res, (s, np.int64(nb)))
                if len(res) > ef:
                    heapq.heappop(res)
    m = len(res)
    rows = np.empty(m, dtype=np.int64)
    sims = np.empty(m, dtype=np.float32)
    for i in range(m - 1, -1, -1):
        s, r = heapq.heappop(res)
        rows[i] = r
        sims[i] = s
    return rows, sims


@njit(cache=True)
def _select_neighbors(vecs, rows, sims, m):
    """Diversity heuristic: keep a candidate only if it is closer to the base
    point than to every neighbour already kept. ``rows`` sorted by sim desc."""
    out = np.empty(min(m, rows.shape[0]), dtype=np.int64)
    k = 0
    for i in range(rows.shape[0]):
        if k >= m:
            break
        c = rows[i]
        good = True
        for j in range(k):
            if np.dot(vecs[c], vecs[out[j]]) > sims[i]:
                good = False
                break
        if good:
            out[k] = c
            k += 1
    return out[:k]


@njit(cache=True)
def _connect(vecs, links, cnt, node, new, cap):
    """Add edge node->new, shrinking node's list with the heuristic on overflow."""
    n = cnt[node]
    if n < cap:
        links[node, n] = new
        cnt[node] = n + 1
        return
    cand = np.empty(n + 1, dtype=np.int64)
    cs = np.empty(n + 1, dtype=np.float32)
    for j in range(n):
        cand[j] = links[node, j]
    cand[n] = new
    for j in range(n + 1):
        cs[j] = np.dot(vecs[cand[j]], vecs[node])
    order = np.argsort(-cs, kind="mergesort")
    kept = _select_neighbors(vecs, cand[order], cs[order], cap)
    for j in range(kept.shape[0]):
        links[node, j] = kept[j]
    cnt[node] = kept.shape[0]


@njit(cache=True)
def _greedy(vecs, q, links, cnt, ep):
    best = ep
    bs = np.dot(vecs[ep], q)
    changed = True
    while changed:
        changed = False
        for j in range(cnt[best]):
            nb = links[best, j]
            s = np.dot(vecs[nb], q)
            if s > bs:
                bs = s
                best = nb
                changed = True
    return best


@njit(cache=True)
def _build(vecs, levels, links0, cnt0, linksU, cntU, m, m0, efc):
    n = vecs.shape[0]
    visited = np.zeros(n, dtype=np.int32)
    top = levels[0]
    tag = 0
    for i in range(1, n):
        q = vecs[i]
        lvl = levels[i]
        ep = 0
        for lc in range(top, lvl, -1):
            ep = _greedy(vecs, q, linksU[lc - 1], cntU[lc - 1], ep)
        entries = np.empty(1, dtype=np.int64)
        entries[0] = ep
        for lc in range(min(lvl, top), -1, -1):
            tag += 1
            if lc == 0:
                links, cnt, cap = links0, cnt0, m0
            else:
                links, cnt, cap = linksU[lc - 1], cntU[lc - 1], m
            rows, sims = _search_layer(vecs, q, links, cnt, entries, efc, visited, tag)
            chosen = _select_neighbors(vecs, rows, sims, m)
            for j in range(chosen.shape[0]):
                links[i, j] = chosen[j]
            cnt[i] = chosen.shape[0]
            for j in range(chosen.shape[0]):
                _connect(vecs, links, cnt, chosen[j], i, cap)
            entries = rows


@njit(cache=True)
def _knn(vecs, q, links0, cnt0, linksU, cntU, top, ef, visited, tag):
    ep = 0
    for lc in range(top, 0, -1):
        ep = _greedy(vecs, q, linksU[lc - 1], cntU[lc - 1], ep)
    entries = np.empty(1, dtype=np.int64)
    entries[0] = ep
    return _search_layer(vecs, q, links0, cnt0, entries, ef, visited, tag)


class HnswIndex(_IndexBase):
    """Hierarchical navigable small-world graph over unit vectors.

    ``vectors``/``ids``/``kinds`` are kept in internal (insertion) order.
    """

    mode = "hnsw"

    def __init__(self, ids, kinds, vectors, params, levels, links0, cnt0, linksU, cntU, seed):
        super().__init__(ids, kinds, vectors)
        self.params = params
        self.seed = seed
        self.levels = levels
        self.links0, self.cnt0 = links0, cnt0
        self.linksU, self.cntU = linksU, cntU
        self._local = threading.local()

    @classmethod
    def from_vectors(cls, ids, kinds, vectors: np.ndarray, params: HnswParams, seed: int = 0) -> HnswIndex:
        n = len(ids)
        m, m0 = params.m, 2 * params.m
        rng = np.random.default_rng(seed)
        ml = 1.0 / math.log(max(m, 2))
        levels = np.minimum(
            np.floor(-np.log(1.0 - rng.random(n)) * ml).astype(np.int64), _MAX_LEVEL
        )
        order = np.argsort(-levels, kind="stable")
        levels = levels[order]
        vecs = np.ascontiguousarray(vectors[order], dtype=np.float32)
        top = int(levels[0]) if n else 0
        n1 = int(np.count_nonzero(levels >= 1))
        links0 = np.zeros((n, m0), dtype=np.int32)
        cnt0 = np.zeros(n, dtype=np.int32)
        linksU = np.zeros((top, n1, m), dtype=np.int32)
        cntU = np.zeros((top, n1), dtype=np.int32)
        if n > 1:
            _build(vecs, levels, links0, cnt0, linksU, cntU, m, m0, params.ef_construction)
        return cls(
            [ids[i] for i in order], [kinds[i] for i in order], vecs, params,
            levels, links0, cnt0, linksU, cntU, seed,
        )

    def _visited(self):
        st = self._local
        buf = getattr(st, "buf", None)
        if buf is None or buf.shape[0] != len(self.ids) or st.tag >= 2**31 - 2:
            st.buf = buf = np.zeros(len(self.ids), dtype=np.int32)
            st.tag = 0
        st.tag += 1
        return buf, st.tag

    def search(self, query, k: int, ef: int | None = None) -> list[ScoredItem]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.ids:
            return []
        q = _prepare_query(query, self.dim)
        ef = max(ef or self.params.ef_search, k)
        visited, tag = self._visited()
        rows, sims = _knn(
            self.vectors, q, self.links0, self.cnt0, self.linksU, self.cntU,
            int(self.levels[0]), ef, visited, tag,
        )
        return _ordered(self.ids, self.kinds, rows, sims, k)


Index = Union[ExactIndex, HnswIndex]


def build(
    collection: Sequence[EmbeddedItem] | tuple[list[str], list[str], np.ndarray],
    mode: str = "exact",
    params: HnswParams | None = None,
    seed: int = 0,
) -> Index:
    """Build a queryable index. Rows are re-normalised defensively."""
    if isinstance(collection, tuple):
        ids, kinds, mat = collection
    else:
        ids, kinds, mat = stack(list(collection))
    ids, kinds = list(ids), list(kinds)
    if len(set(zip(kinds, ids))) != len(ids):
        raise ConfigurationError("duplicate item ids in collection")
    mat = np.asarray(mat, dtype=np.float32)
    if ids:
        if mat.ndim != 2 or mat.shape[0] != len(ids):
            raise ConfigurationError("vector matrix does not match id list")
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        if not np.all(np.isfinite(norms)) or np.any(norms == 0):
            raise EmbeddingError("collection contains zero or non-finite vectors")
        mat = np.ascontiguousarray(mat / norms, dtype=np.float32)
    if mode == "exact":
        return ExactIndex(ids, kinds, mat)
    if mode == "hnsw":
        return HnswIndex.from_vectors(ids, kinds, mat, params or HnswParams(), seed)
    raise ConfigurationError(f"unknown index mode {mode!r}")


def search(index: Index, query, k: int) -> list[ScoredItem]:
    return index.search(query, k)


# -------------------------------------------------------------- persistence

def save_index(index: Index, path: str | Path) -> None:
    header = {"version": INDEX_FORMAT_VERSION, "mode": index.mode}
    arrays = {
        "ids": np.array(index.ids, dtype=str),
        "kinds": np.array(index.kinds, dtype=str),
        "vectors": index.vectors,
    }
    if isinstance(index, HnswIndex):
        header["params"] = asdict(index.params)
        header["seed"] = index.seed
        arrays.update(
            levels=index.levels, links0=index.links0, cnt0=index.cnt0,
            linksU=index.linksU, cntU=index.cntU,
        )
    with Path(path).open("wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_index(path: str | Path) -> Index:
    with np.load(Path(path), allow_pickle=False) as data:
        try:
            header = json.loads(str(data["header"]))
        except KeyError:
            raise FormatError("missing index header", path=str(path)) from None
        if header.get("version") != INDEX_FORMAT_VERSION:
            raise FormatError(f"unsupported index version {header.get('version')}", path=str(path))
        ids = [str(x) for x in data["ids"]]
        kinds = [str(x) for x in data["kinds"]]
        vectors = np.ascontiguousarray(data["vectors"], dtype=np.float32)
        if header["mode"] == "exact":
            return ExactIndex(ids, kinds, vectors)
        return HnswIndex(
            ids, kinds, vectors, HnswParams(**header["params"]),
            data["levels"].astype(np.int64), data["links0"], data["cnt0"],
            data["linksU"], data["cntU"], header["seed"],
        )
