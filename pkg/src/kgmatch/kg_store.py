"""In-memory knowledge-graph store loaded from Wikidata5M-style dumps.

Three tab-separated inputs are understood:

* triples: ``head<TAB>relation<TAB>tail`` per line
* aliases: ``id<TAB>label<TAB>alias...`` per line (entities and relations
  use separate files); the first alias becomes the label
* descriptions (optional): ``id<TAB>description``

Edges are indexed in both directions so traversals can walk a triple from
either end. Entities that only appear in triples are treated as stubs with
an empty label; they are materialised on lookup rather than stored.

The store is built by a single writer; once ingestion finishes it is never
mutated by the retrieval code and may be shared across threads.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal

from .errors import FormatError, NotFoundError

logger = logging.getLogger(__name__)

OUTGOING = "outgoing"
INCOMING = "incoming"

Mode = Literal["strict", "lenient"]
Kind = Literal["entity", "relation"]

_intern = sys.intern


@dataclass(slots=True)
class Entity:
    id: str
    label: str = ""
    description: str = ""
    aliases: list[str] = field(default_factory=list)


@dataclass(slots=True)
class Relation:
    id: str
    label: str = ""
    description: str = ""
    aliases: list[str] = field(default_factory=list)


@dataclass(frozen=True, slots=True)
class Triple:
    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class StoreStats:
    entity_count: int
    relation_count: int
    triple_count: int
    max_degree: int


@dataclass(frozen=True)
class IngestReport:
    """Line accounting for one ingest call.

    ``loaded + skipped + merged`` equals the number of lines read. ``merged``
    is only non-zero for alias files, where a repeated id enriches an
    existing record instead of creating one.
    """

    loaded: int
    skipped: int
    merged: int = 0

    @property
    def lines(self) -> int:
        return self.loaded + self.skipped + self.merged


def _check_mode(mode: str) -> None:
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")


class KGStore:
    """Triples, labels and a bidirectional adjacency index."""

    def __init__(self) -> None:
        self._entities: dict[str, Entity] = {}
        self._relations: dict[str, Relation] = {}
        self._triples: set[tuple[str, str, str]] = set()
        # node -> [(relation, neighbour, direction)], insertion ordered
        self._adj: dict[str, list[tuple[str, str, str]]] = {}
        self._entity_labels: dict[str, list[str]] = {}
        self._relation_labels: dict[str, list[str]] = {}

    # ------------------------------------------------------------------ ingest

    def ingest_triples(self, path: str | Path, mode: Mode = "lenient") -> IngestReport:
        """Load a triples file; duplicates and (in lenient mode) bad lines are skipped."""
        _check_mode(mode)
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            report = self._add_lines(fh, mode, str(path))
        logger.info("ingested %s: loaded=%d skipped=%d", path, report.loaded, report.skipped)
        return report

    def add_triples(
        self, triples: Iterable[tuple[str, str, str] | Triple], mode: Mode = "lenient"
    ) -> IngestReport:
        """Add in-memory triples with the same rules as :meth:`ingest_triples`."""
        _check_mode(mode)
        lines = (
            f"{t.head}\t{t.relation}\t{t.tail}" if isinstance(t, Triple) else "\t".join(t)
            for t in triples
        )
        return self._add_lines(lines, mode, None)

    def _add_lines(self, lines: Iterable[str], mode: str, source: str | None) -> IngestReport:
        strict = mode == "strict"
        triples = self._triples
        adj = self._adj
        relations = self._relations
        loaded = skipped = 0
        for lineno, raw in enumerate(lines, 1):
            parts = raw.rstrip("\r\n").split("\t")
            if len(parts) != 3 or not all(parts):
                if strict:
                    raise FormatError(
                        f"expected 'head<TAB>relation<TAB>tail', got {raw.rstrip()!r}",
                        path=source,
                        line=lineno,
                    )
                skipped += 1
                continue
            h, r, t = (_intern(p.strip()) for p in parts)
            if strict:
                missing = [
                    i
                    for i, ok in ((h, self.has_entity(h)), (r, r in relations), (t, self.has_entity(t)))
                    if not ok
                ]
                if missing:
                    raise FormatError(f"unresolvable id {missing[0]!r}", path=source, line=lineno)
            key = (h, r, t)
            if key in triples:
                skipped += 1
                continue
            triples.add(key)
            if r not in relations:
                relations[r] = Relation(r)
            out = adj.get(h)
            if out is None:
                out = adj[h] = []
            out.append((r, t, OUTGOING))
            inc = adj.get(t)
            if inc is None:
                inc = adj[t] = []
            inc.append((r, h, INCOMING))
            loaded += 1
        return IngestReport(loaded, skipped)

    def ingest_labels(
        self,
        entities_path: str | Path | None,
        relations_path: str | Path | None,
        mode: Mode = "lenient",
    ) -> IngestReport:
        """Load entity and relation alias files; returns the combined report."""
        _check_mode(mode)
        total = IngestReport(0, 0)
        for p, records, index, factory in (
            (entities_path, self._entities, self._entity_labels, Entity),
            (relations_path, self._relations, self._relation_labels, Relation),
        ):
            if p is None:
                continue
            with Path(p).open("r", encoding="utf-8") as fh:
                rep = self._ingest_alias_lines(fh, mode, str(p), records, index, factory)
            total = IngestReport(
                total.loaded + rep.loaded, total.skipped + rep.skipped, total.merged + rep.merged
            )
        return total

    def _ingest_alias_lines(self, lines, mode, source, records, index, factory) -> IngestReport:
        loaded = skipped = merged = 0
        for lineno, raw in enumerate(lines, 1):
            parts = [p.strip() for p in raw.rstrip("\r\n").split("\t")]
            if len(parts) < 2 or not parts[0] or not parts[1]:
                if mode == "strict":
                    raise FormatError(
                        f"expected 'id<TAB>label[<TAB>alias...]', got {raw.rstrip()!r}",
                        path=source,
                        line=lineno,
                    )
                skipped += 1
                continue
            ident, names = _intern(parts[0]), [n for n in parts[1:] if n]
            rec = records.get(ident)
            if rec is not None and rec.label:
                merged += 1
                for name in names:
                    if name != rec.label and name not in rec.aliases:
                        rec.aliases.append(name)
                        self._index_label(index, name, ident)
                continue
            if rec is None:
                rec = records[ident] = factory(ident)
            loaded += 1
            rec.label = names[0]
            rec.aliases = [n for n in dict.fromkeys(names[1:]) if n != rec.label]
            for name in names:
                self._index_label(index, name, ident)
        return IngestReport(loaded, skipped, merged)

    def ingest_descriptions(self, path: str | Path, kind: Kind = "entity") -> IngestReport:
        """Attach ``id<TAB>description`` lines to existing or new records."""
        records, factory = (
            (self._entities, Entity) if kind == "entity" else (self._relations, Relation)
        )
        loaded = skipped = 0
        with Path(path).open("r", encoding="utf-8") as fh:
            for raw in fh:
                ident, sep, desc = raw.rstrip("\r\n").partition("\t")
                ident = ident.strip()
                if not sep or not ident:
                    skipped += 1
                    continue
                rec = records.get(ident)
                if rec is None:
                    rec = records[_intern(ident)] = factory(_intern(ident))
                rec.description = desc.strip()
                loaded += 1
        return IngestReport(loaded, skipped)

    @staticmethod
    def _index_label(index: dict[str, list[str]], name: str, ident: str) -> None:
        ids = index.setdefault(name.casefold(), [])
        if ident not in ids:
            ids.append(ident)

    # ----------------------------------------------------------------- queries

    def has_entity(self, ident: str) -> bool:
        return ident in self._entities or ident in self._adj

    def has_relation(self, ident: str) -> bool:
        return ident in self._relations

    def has_triple(self, head: str, relation: str, tail: str) -> bool:
        return (head, relation, tail) in self._triples

    def neighbors(self, entity_id: str) -> list[tuple[str, str, str]]:
        """Incident edges as ``(relation_id, neighbor_id, direction)``; [] if unknown."""
        return list(self._adj.get(entity_id, ()))

    def iter_neighbors(self, entity_id: str):
        """Like :meth:`neighbors` without the defensive copy; callers must not mutate."""
        return self._adj.get(entity_id, ())

    def degree(self, entity_id: str) -> int:
        return len(self._adj.get(entity_id, ()))

    def resolve_label(self, label: str) -> list[str]:
        """Entity ids whose label or alias matches ``label`` case-insensitively."""
        return list(self._entity_labels.get(label.strip().casefold(), ()))

    def resolve_relation_label(self, label: str) -> list[str]:
        return list(self._relation_labels.get(label.strip().casefold(), ()))

    def lookup(self, ident: str, kind: Kind = "entity") -> Entity | Relation:
        if kind == "entity":
            rec = self._entities.get(ident)
            if rec is None and ident in self._adj:
                return Entity(ident)
        elif kind == "relation":
            rec = self._relations.get(ident)
        else:
            raise ValueError(f"kind must be 'entity' or 'relation', got {kind!r}")
        if rec is None:
            raise NotFoundError(f"{kind} {ident!r} not found")
        return rec

    def label_of(self, ident: str, kind: Kind = "entity") -> str:
        """Label for display; falls back to the id itself."""
        records = self._entities if kind == "entity" else self._relations
        rec = records.get(ident)
        return rec.label if rec is not None and rec.label else ident

    def entities(self) -> Iterator[Entity]:
        """Every known entity, labelled records first, then triple-only stubs."""
        yield from self._entities.values()
        for ident in self._adj:
            if ident not in self._entities:
                yield Entity(ident)

    def relations(self) -> Iterator[Relation]:
        yield from self._relations.values()

    def triples(self) -> Iterator[Triple]:
        for h, r, t in self._triples:
            yield Triple(h, r, t)

    def sorted_triples(self) -> list[Triple]:
        """Triples in a stable order, for reproducible corpus files."""
        return [Triple(*k) for k in sorted(self._triples)]

    def stats(self) -> StoreStats:
        stubs = sum(1 for ident in self._adj if ident not in self._entities)
        return StoreStats(
            entity_count=len(self._entities) + stubs,
            relation_count=len(self._relations),
            triple_count=len(self._triples),
            max_degree=max((len(v) for v in self._adj.values()), default=0),
        )
