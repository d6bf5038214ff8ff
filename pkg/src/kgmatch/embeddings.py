"""Text composition, embedding providers and the on-disk vector format.

Vectors are unit-normalised before they leave this module, so downstream
cosine similarity reduces to a dot product.

Collection file layout (little endian)::

    header:  b"KGEV" magic, u16 format version
    record:  kind u8 | id_len u16 | id utf-8 bytes | dim u32 | float32[dim]
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np

from .errors import (
    ConfigurationError,
    CorpusEmbeddingError,
    EmbeddingError,
    FormatError,
    TransportError,
)
from .generation import MatchQuestion
from .kg_store import Entity, KGStore, Relation, Triple

logger = logging.getLogger(__name__)

DEFAULT_DIM = 300
DEFAULT_BATCH_SIZE = 32

KINDS = ("entity", "relation", "triple", "question")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

MAGIC = b"KGEV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH")
_REC_HEAD = struct.Struct("<BH")
_DIM = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class EmbeddedItem:
    item_id: str
    kind: str
    vector: np.ndarray  # float32, unit norm

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddedItem):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.kind == other.kind
            and self.vector.dtype == other.vector.dtype
            and np.array_equal(self.vector, other.vector)
        )


def normalize(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm. Zero or non-finite input raises."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise EmbeddingError(f"expected a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("vector contains non-finite values")
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return arr / norm


# --------------------------------------------------------------- text

def _label_and_desc(rec: Entity | Relation) -> str:
    label = rec.label or rec.id
    return f"{label}. {rec.description}" if rec.description else label


def _node_text(store: KGStore | None, ident: str, kind: str) -> tuple[str, str]:
    if store is None:
        return ident, ""
    try:
        rec = store.lookup(ident, kind)
    except KeyError:
        return ident, ""
    return rec.label or ident, rec.description


def compose_text(item: Entity | Relation | Triple | MatchQuestion, store: KGStore | None = None) -> str:
    """Canonical text that gets embedded for ``item``."""
    if isinstance(item, (Entity, Relation)):
        return _label_and_desc(item)
    if isinstance(item, Triple):
        parts = []
        for ident, kind in ((item.head, "entity"), (item.relation, "relation"), (item.tail, "entity")):
            label, desc = _node_text(store, ident, kind)
            if kind == "relation":
                parts.append(f"{label}.")
            else:
                parts.append(f"{label} {desc}." if desc else f"{label}.")
        return " ".join(parts)
    if isinstance(item, MatchQuestion):
        return item.text()
    raise TypeError(f"cannot compose text for {type(item).__name__}")


# ----------------------------------------------------------- providers

class EmbeddingProvider(Protocol):
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> list[Sequence[float]]: ...


_TOKEN = re.compile(r"\w+")


class HashEmbedder:
    """Deterministic bag-of-words embedder for offline use.

    Each lower-cased token is hashed into one of ``dim`` buckets with a
    hash-derived sign. Identical texts always map to identical vectors and
    texts sharing tokens get positive cosine similarity.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: str = ""):
        if dim < 1:
            raise ConfigurationError("dim must be positive")
        self.dim = dim
        self._salt = seed.encode("utf-8")
        self._cache: dict[str, tuple[int, float]] = {}

    def _bucket(self, token: str) -> tuple[int, float]:
        hit = self._cache.get(token)
        if hit is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._salt).digest()
            n = int.from_bytes(digest, "little")
            hit = (n % self.dim, 1.0 if (n >> 63) & 1 else -1.0)
            if len(self._cache) < 1_000_000:
                self._cache[token] = hit
        return hit

    def embed_one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        tokens = _TOKEN.findall(text.casefold()) or ([text] if text else [])
        for tok in tokens:
            idx, sign = self._bucket(tok)
            v[idx] += sign
        if not v.any() and tokens:
            # every token cancelled out; fall back to the whole string
            idx, sign = self._bucket("\x00" + text)
            v[idx] = sign
        return v

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


class HttpEmbeddingProvider:
    """Client for an HTTP embedding endpoint.

    Request body is ``{"texts": [...], "model": ...}``; the response must be
    either a JSON list of float arrays or an object with an ``embeddings``
    list, parallel to ``texts``.
    """

    def __init__(
        self,
        url: str,
        model: str,
        dim: int = DEFAULT_DIM,
        *,
        api_key_env: str = "KGMATCH_EMBED_API_KEY",
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.model = model
        self.dim = dim
        self.retries = retries
        self.backoff = backoff
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        payload = {"texts": list(texts), "model": self.model}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=payload, headers=self._headers)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"embedding endpoint returned {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise EmbeddingError(f"embedding endpoint returned {resp.status_code}: {resp.text[:200]}")
            body = resp.json()
            vectors = body.get("embeddings") if isinstance(body, dict) else body
            if not isinstance(vectors, list) or len(vectors) != len(texts):
                raise EmbeddingError("embedding response is not parallel to the request texts")
            return vectors
        raise TransportError(f"embedding request failed after {self.retries + 1} attempts: {last}")


def _check_dim(vec: Sequence[float], dim: int) -> None:
    if len(vec) != dim:
        raise ConfigurationError(f"provider returned a {len(vec)}-dim vector, configured dim is {dim}")


def embed(text: str, provider: EmbeddingProvider, dim: int | None = None) -> np.ndarray:
    """Embed one text; returns a unit-norm float32 vector of length ``dim``."""
    return embed_texts([text], provider, dim)[0]


def embed_texts(texts: Sequence[str], provider: EmbeddingProvider, dim: int | None = None) -> np.ndarray:
    dim = provider.dim if dim is None else dim
    if not texts:
        return np.zeros((0, dim), dtype=np.float32)
    raw = provider.embed_batch(list(texts))
    if len(raw) != len(texts):
        raise EmbeddingError(f"provider returned {len(raw)} vectors for {len(texts)} texts")
    out = np.empty((len(texts), dim), dtype=np.float32)
    for i, vec in enumerate(raw):
        _check_dim(vec, dim)
        out[i] = normalize(vec)
    return out


# ---------------------------------------------------------- persistence

def _encode(kind: str, item_id: str, vec: np.ndarray) -> bytes:
    ident = item_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise FormatError(f"id too long to persist: {item_id[:40]!r}...")
    v = np.ascontiguousarray(vec, dtype="<f4")
    return b"".join(
        (_REC_HEAD.pack(_KIND_CODE[kind], len(ident)), ident, _DIM.pack(v.shape[0]), v.tobytes())
    )


def _scan(buf: bytes | memoryview, path: str) -> tuple[list[EmbeddedItem], int, str | None]:
    """Decode records; returns (items, end offset of last good record, error)."""
    if len(buf) < _HEADER.size:
        raise FormatError("missing collection header", path=path)
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("not an embedding collection (bad magic)", path=path)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported collection version {version}", path=path)
    items: list[EmbeddedItem] = []
    off = good = _HEADER.size
    n = len(buf)
    while off < n:
        idx = len(items)
        if off + _REC_HEAD.size > n:
            return items, good, f"truncated record {idx}"
        code, id_len = _REC_HEAD.unpack_from(buf, off)
        if code >= len(KINDS):
            return items, good, f"record {idx} has unknown kind code {code}"
        p = off + _REC_HEAD.size
        if p + id_len + _DIM.size > n:
            return items, good, f"truncated record {idx}"
        try:
            item_id = bytes(buf[p : p + id_len]).decode("utf-8")
        except UnicodeDecodeError:
            return items, good, f"record {idx} has an undecodable id"
        p += id_len
        (dim,) = _DIM.unpack_from(buf, p)
        p += _DIM.size
        if p + 4 * dim > n:
            return items, good, f"truncated record {idx}"
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=p).astype(np.float32)
        if not np.all(np.isfinite(vec)):
            return items, good, f"record {idx} has non-finite values"
        items.append(EmbeddedItem(item_id, KINDS[code], vec))
        off = good = p + 4 * dim
    return items, good, None


def load_embeddings(path: str | Path) -> list[EmbeddedItem]:
    """Read a collection written by :func:`embed_corpus` or :func:`write_embeddings`."""
    path = Path(path)
    buf = path.read_bytes()
    items, _, err = _scan(buf, str(path))
    if err is not None:
        last = len(items) - 1
        raise FormatError(f"{err}; last valid record index is {last}", path=str(path))
    return items


def write_embeddings(path: str | Path, items: Iterable[EmbeddedItem]) -> int:
    n = 0
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        for it in items:
            fh.write(_encode(it.kind, it.item_id, it.vector))
            n += 1
    return n


@dataclass(frozen=True)
class CorpusResult:
    path: Path
    count: int  # records in the file after this call
    written: int  # records added by this call
    batches: int  # provider calls made


def _open_for_resume(path: Path) -> tuple[set[tuple[str, str]], int]:
    """Existing (kind, id) keys, truncating a torn trailing record."""
    if not path.exists() or path.stat().st_size == 0:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        return set(), 0
    buf = path.read_bytes()
    items, good, err = _scan(buf, str(path))
    if err is not None:
        logger.warning("%s: %s; truncating to %d records and resuming", path, err, len(items))
        with path.open("r+b") as fh:
            fh.truncate(good)
    return {(it.kind, it.item_id) for it in items}, len(items)


def embed_corpus(
    items: Iterable[tuple[str, str, str]],
    provider: EmbeddingProvider,
    path: str | Path,
    batch_size: int = DEFAULT_BATCH_SIZE,
    *,
    dim: int | None = None,
    workers: int = 1,
) -> CorpusResult:
    """Embed ``(item_id, kind, text)`` tuples into a collection file.

    Rerunning against an existing file skips ids already stored, so an
    interrupted run picks up where it stopped. If the provider fails, every
    batch finished before the failure is kept and ``CorpusEmbeddingError``
    reports how many records the file now holds.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    dim = provider.dim if dim is None else dim
    path = Path(path)
    seen, count = _open_for_resume(path)
    pending: list[tuple[str, str, str]] = []
    for item_id, kind, text in items:
        if kind not in _KIND_CODE:
            raise ConfigurationError(f"unknown item kind {kind!r}")
        key = (kind, item_id)
        if key in seen:
            continue
        seen.add(key)
        pending.append((item_id, kind, text))
    batches = [pending[i : i + batch_size] for i in range(0, len(pending), batch_size)]

    def run(batch):
        return embed_texts([t for _, _, t in batch], provider, dim)

    written = 0
    with path.open("ab") as fh, ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        try:
            for batch, vecs in zip(batches, pool.map(run, batches)):
                fh.write(b"".join(_encode(k, i, v) for (i, k, _), v in zip(batch, vecs)))
                fh.flush()
                written += len(batch)
        except (TransportError, EmbeddingError, ConfigurationError, httpx.HTTPError) as exc:
            pool.shutdown(cancel_futures=True)
            raise CorpusEmbeddingError(f"embedding stopped: {exc}", completed=count + written) from exc
    logger.info("embedded %d new items into %s (%d total)", written, path, count + written)
    return CorpusResult(path, count + written, written, len(batches))


def stack(items: Sequence[EmbeddedItem]) -> tuple[list[str], list[str], np.ndarray]:
    """Split a collection into ids, kinds and an (n, dim) float32 matrix."""
    if not items:
        return [], [], np.zeros((0, 0), dtype=np.float32)
    dims = {it.dim for it in items}
    if len(dims) != 1:
        raise ConfigurationError(f"collection mixes vector dims {sorted(dims)}")
    mat = np.stack([it.vector for it in items]).astype(np.float32, copy=False)
    return [it.item_id for it in items], [it.kind for it in items], mat
