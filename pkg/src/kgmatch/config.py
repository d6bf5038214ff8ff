"""Application configuration: nested dataclasses loaded from JSON.

Unknown keys are rejected at every level so typos fail loudly. The
effective configuration (file plus flag overrides) is hashed and echoed
into every report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .ranking import SCHEMES, parse_top
from .retrieval import STRATEGIES


@dataclass
class PathsConfig:
    work_dir: str = "work"
    kg_triples: str = ""
    entity_labels: str = ""
    relation_labels: str = ""
    entity_descriptions: str = ""
    relation_descriptions: str = ""
    dataset: str = ""
    templates: str = ""
    replay_store: str = ""  # empty means <work_dir>/replay.jsonl


@dataclass
class RetrievalSection:
    d_max: int = 3
    k_entities: int = 5
    k_relations: int = 5
    k_triples: int = 10
    path_cap: int = 100


@dataclass
class RankingSection:
    scheme: str = "auto"  # auto: similarity for triple_vec, frequency otherwise
    top: str = "2"


@dataclass
class EmbeddingSection:
    provider: str = "hash"  # hash | http
    dim: int = 300
    batch_size: int = 32
    url: str = ""
    model: str = ""
    api_key_env: str = "KGMATCH_EMBED_API_KEY"
    seed: str = ""


@dataclass
class IndexSection:
    mode: str = "hnsw"  # hnsw | exact
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 600


@dataclass
class LLMSection:
    mode: str = "replay"  # live | record | replay
    model: str = "gpt-4o-mini"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0
    rate_limit: float = 0.0  # requests per second, 0 = unlimited
    send_top_k: bool = False


@dataclass
class SamplingSection:
    temperature: float = 0.6
    top_p: float = 0.9
    top_k: int = 1
    max_new_tokens: int = 4096


@dataclass
class AppConfig:
    strategy: str = "triple_vec"
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    ranking: RankingSection = field(default_factory=RankingSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    index: IndexSection = field(default_factory=IndexSection)
    llm: LLMSection = field(default_factory=LLMSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.ranking.scheme not in SCHEMES + ("auto",):
            problems.append(f"ranking.scheme must be one of {SCHEMES + ('auto',)}")
        try:
            parse_top(self.ranking.top)
        except (TypeError, ValueError):
            problems.append("ranking.top must be a positive integer or 'all'")
        for name, value in dataclasses.asdict(self.retrieval).items():
            if value < 1:
                problems.append(f"retrieval.{name} must be >= 1")
        if self.embedding.provider not in ("hash", "http"):
            problems.append("embedding.provider must be 'hash' or 'http'")
        if self.embedding.provider == "http" and not self.embedding.url:
            problems.append("embedding.url is required for the http provider")
        if self.embedding.dim < 1 or self.embedding.batch_size < 1:
            problems.append("embedding.dim and embedding.batch_size must be >= 1")
        if self.index.mode not in ("hnsw", "exact"):
            problems.append("index.mode must be 'hnsw' or 'exact'")
        if min(self.index.m, self.index.ef_construction, self.index.ef_search) < 1:
            problems.append("index.m, index.ef_construction and index.ef_search must be >= 1")
        if self.llm.mode not in ("live", "record", "replay"):
            problems.append("llm.mode must be live, record or replay")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if not 0 <= self.sampling.top_p <= 1 or self.sampling.temperature < 0:
            problems.append("sampling.top_p must be in [0, 1] and sampling.temperature >= 0")
        if self.sampling.max_new_tokens < 1 or self.sampling.top_k < 1:
            problems.append("sampling.max_new_tokens and sampling.top_k must be >= 1")
        if problems:
            raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))


def _coerce(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigurationError("unknown config keys: " + ", ".join(prefix + k for k in unknown))
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _coerce(type(default), value, key)
        else:
            kwargs[name] = _convert(value, default, key)
    return cls(**kwargs)


def _convert(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be true or false")
        return value
    try:
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key} has the wrong type: {value!r}") from None


def from_dict(data: dict) -> AppConfig:
    return _coerce(AppConfig, data, "")


def load_config(path: str | Path | None) -> AppConfig:
    if not path:
        return AppConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(data)


def iter_defaults(cfg: Any = None, prefix: str = ""):
    """(dotted key, default) for every leaf setting."""
    cfg = AppConfig() if cfg is None else cfg
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield from iter_defaults(value, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", value
