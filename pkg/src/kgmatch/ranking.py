"""Scoring and ordering of retrieved paths and triples.

Three path schemes are available:

* ``frequency``: number of hops whose relation is among the top retrieved relations
* ``normalized``: frequency divided by the number of hops
* ``similarity``: a caller-supplied cosine score per path

Ties are broken by hop count (shorter first) and then by the hop id
sequence, so the ordering is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

from .retrieval import Path
from .vector_index import ScoredItem

SCHEMES = ("frequency", "normalized", "similarity")
TopN = Union[int, str]


@dataclass(frozen=True)
class RankedPath:
    path: Path
    score: float
    scheme: str


def score_frequency(path: Path, top_relations: Sequence[str]) -> int:
    wanted = set(top_relations)
    return sum(1 for h in path.hops if h.relation in wanted)


def score_normalized(path: Path, top_relations: Sequence[str]) -> float:
    if not path.hops:
        raise ValueError("cannot normalise the score of an empty path")
    return score_frequency(path, top_relations) / len(path.hops)


def rank_paths(
    paths: Sequence[Path],
    top_relations: Sequence[str] = (),
    scheme: str = "frequency",
    similarity: Callable[[Path], float] | None = None,
) -> list[RankedPath]:
    if scheme == "frequency":
        scored = [(p, score_frequency(p, top_relations)) for p in paths]
    elif scheme == "normalized":
        scored = [(p, score_normalized(p, top_relations)) for p in paths]
    elif scheme == "similarity":
        if similarity is None:
            raise ValueError("the similarity scheme needs a similarity function")
        scored = [(p, float(similarity(p))) for p in paths]
    else:
        raise ValueError(f"unknown ranking scheme {scheme!r}; expected one of {SCHEMES}")
    scored.sort(key=lambda ps: (-ps[1], len(ps[0].hops), ps[0].key()))
    return [RankedPath(p, s, scheme) for p, s in scored]


def rank_triples(triples: Sequence[ScoredItem]) -> list[ScoredItem]:
    return sorted(triples, key=lambda t: (-t.score, t.item_id))


def parse_top(value: TopN) -> int | None:
    """``1``, ``2``, ``"all"`` or any positive int; ``None`` stands for all."""
    if isinstance(value, str):
        if value.strip().lower() == "all":
            return None
        value = int(value)
    if value < 1:
        raise ValueError("top-n must be >= 1 or 'all'")
    return value


def take_top(ranked: Sequence, n: TopN) -> list:
    limit = parse_top(n)
    return list(ranked) if limit is None else list(ranked[:limit])
