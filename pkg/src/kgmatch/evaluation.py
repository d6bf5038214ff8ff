"""Dataset loading, the per-question pipeline, metrics and report files.

Report layout (``out_dir``):

* ``results.jsonl``        one line per question: decision, label, context
* ``summary.json``         metrics, counts, strategy and the config echo
* ``timings.jsonl``        per-question embed/retrieval/generation seconds
* ``timing_summary.json``  mean seconds per phase

The first two files depend only on inputs and are byte-identical across
replayed runs. Wall-clock numbers live in the timing files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from .embeddings import embed
from .errors import ConfigurationError, FormatError, KGMatchError
from .generation import (
    MatchDecision,
    MatchQuestion,
    PromptTemplates,
    SamplingParams,
    build_prompt,
    build_question,
    parse_answer,
    verbalize_paths,
)
from .ranking import SCHEMES, rank_paths, rank_triples, take_top
from .retrieval import (
    RetrievalContext,
    RetrievalOutcome,
    check_context,
    question_vector,
    run_strategy,
    triple_path,
)

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------- dataset

def load_dataset(path: str | Path) -> list[MatchQuestion]:
    """Read a comma-separated file of (source, target, desc1, desc2, label) rows.

    A first row whose label column is not a digit is treated as a header.
    """
    path = Path(path)
    out: list[MatchQuestion] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            lineno = reader.line_num
            if not any(c.strip() for c in row):
                continue
            if not out and lineno == 1 and len(row) >= 5 and not row[4].strip().isdigit():
                continue  # header
            if len(row) != 5:
                raise FormatError(f"expected 5 columns, got {len(row)}", path=str(path), line=lineno)
            try:
                out.append(build_question(row, question_id=f"q{len(out) + 1:05d}"))
            except FormatError as exc:
                raise FormatError(str(exc), path=str(path), line=lineno) from None
    return out


# ----------------------------------------------------------------- records

@dataclass
class Timings:
    embed_s: float = 0.0
    retrieval_s: float = 0.0
    generation_s: float = 0.0


@dataclass
class RunRecord:
    question_id: str
    decision: MatchDecision
    label: int | None
    timings: Timings = field(default_factory=Timings)
    context_size: int = 0
    context: str = ""
    prompt_kind: str = "matcher"
    error: str | None = None
    retrieval: RetrievalOutcome | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def result_dict(self) -> dict:
        """Deterministic part of the record (no timings)."""
        return {
            "question_id": self.question_id,
            "label": self.label,
            "verdict": self.decision.verdict,
            "parse_status": self.decision.parse_status,
            "raw_text": self.decision.raw_text,
            "prompt_kind": self.prompt_kind,
            "context_size": self.context_size,
            "context": self.context,
            "error": self.error,
        }

    def timing_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "embed_s": self.timings.embed_s,
            "retrieval_s": self.timings.retrieval_s,
            "generation_s": self.timings.generation_s,
        }


# ---------------------------------------------------------------- pipeline

def default_scheme(strategy: str) -> str:
    return "similarity" if strategy == "triple_vec" else "frequency"


class Pipeline:
    """Retrieve, rank, prompt and parse for one question at a time."""

    def __init__(
        self,
        ctx: RetrievalContext,
        llm,
        strategy: str = "triple_vec",
        scheme: str | None = None,
        top="2",
        templates: PromptTemplates | None = None,
        params: SamplingParams | None = None,
    ):
        check_context(strategy, ctx)
        if llm is None:
            raise ConfigurationError("the pipeline needs an LLM client")
        scheme = scheme or default_scheme(strategy)
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown ranking scheme {scheme!r}")
        take_top([], top)  # validates
        self.ctx = ctx
        self.llm = llm
        self.strategy = strategy
        self.scheme = scheme
        self.top = top
        self.templates = templates or ctx.templates
        self.params = params or SamplingParams()

    def _similarity(self, question: MatchQuestion, timings: Timings):
        provider = self.ctx.provider
        qvec = None

        def score(path) -> float:
            nonlocal qvec
            t0 = time.perf_counter()
            if qvec is None:
                qvec = question_vector(question, provider)
            vec = embed(verbalize_paths([path], self.ctx.store), provider)
            timings.embed_s += time.perf_counter() - t0
            return float(np.dot(qvec, vec))

        return score

    def select(self, question: MatchQuestion, outcome: RetrievalOutcome, timings: Timings) -> list:
        if self.strategy == "triple_vec" and self.scheme == "similarity":
            ranked = rank_triples(outcome.triples)
            return [triple_path(t) for t in take_top(ranked, self.top)]
        paths = outcome.paths
        if len(paths) > 1:
            sim = self._similarity(question, timings) if self.scheme == "similarity" else None
            ranked = [rp.path for rp in rank_paths(paths, outcome.relations, self.scheme, sim)]
        else:
            ranked = list(paths)
        return take_top(ranked, self.top)

    def answer(self, question: MatchQuestion) -> RunRecord:
        timings = Timings()
        rec = RunRecord(question.question_id, MatchDecision("negative", "", "unparseable"), question.label, timings)
        try:
            outcome = run_strategy(question, self.strategy, self.ctx)
            rec.retrieval = outcome
            timings.embed_s += outcome.embed_time
            timings.retrieval_s += outcome.retrieval_time
            t0 = time.perf_counter()
            selected = self.select(question, outcome, timings)
            context = verbalize_paths(selected, self.ctx.store)
            timings.retrieval_s += time.perf_counter() - t0
            if context:
                payload = build_prompt("rag_matcher", question, context, self.templates, self.params)
                rec.prompt_kind, rec.context, rec.context_size = "rag_matcher", context, len(selected)
            else:
                payload = build_prompt("matcher", question, None, self.templates, self.params)
            t0 = time.perf_counter()
            raw = self.llm.complete(payload)
            timings.generation_s = time.perf_counter() - t0
            rec.decision = parse_answer(raw)
        except (KGMatchError, httpx.HTTPError, OSError, ValueError) as exc:
            logger.warning("question %s failed: %s", question.question_id, exc)
            rec.error = f"{type(exc).__name__}: {exc}"
        return rec


def run_eval(
    dataset: Sequence[MatchQuestion],
    pipeline: Pipeline,
    stream_path: str | Path | None = None,
    workers: int = 1,
) -> list[RunRecord]:
    """Answer every question; failures are recorded, never raised.

    Records are appended to ``stream_path`` (JSON lines, input order) as
    soon as each one and all earlier ones are done.
    """
    records: list[RunRecord] = []
    fh = None
    if stream_path is not None:
        Path(stream_path).parent.mkdir(parents=True, exist_ok=True)
        fh = Path(stream_path).open("w", encoding="utf-8")
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for rec in pool.map(pipeline.answer, dataset):
                records.append(rec)
                if fh is not None:
                    line = {**rec.result_dict(), **rec.timing_dict()}
                    fh.write(json.dumps(line, ensure_ascii=False, sort_keys=True) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return records


# ----------------------------------------------------------------- metrics

def truncate2(x: float) -> float:
    """Two-decimal display value, truncated (47.826 -> 47.82) like the benchmark tables."""
    return math.floor(x * 100 + 1e-9) / 100


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float  # percent, full precision
    recall: float
    f1: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def reported(self) -> dict:
        return {"precision": truncate2(self.precision), "recall": truncate2(self.recall), "f1": truncate2(self.f1)}

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "reported": self.reported(),
        }


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int = 0) -> Metrics:
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return Metrics(tp, fp, fn, tn, p, r, f1)


def compute_metrics(records: Iterable[RunRecord]) -> Metrics:
    tp = fp = fn = tn = 0
    for rec in records:
        pos, gold = rec.decision.positive, rec.label == 1
        if pos and gold:
            tp += 1
        elif pos:
            fp += 1
        elif gold:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(tp, fp, fn, tn)


# ------------------------------------------------------------------ report

def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def report(
    records: Sequence[RunRecord],
    metrics: Metrics,
    out_dir: str | Path,
    config: dict | None = None,
    config_hash: str = "",
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "results": out / "results.jsonl",
        "summary": out / "summary.json",
        "timings": out / "timings.jsonl",
        "timing_summary": out / "timing_summary.json",
    }
    with files["results"].open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.result_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    with files["timings"].open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.timing_dict(), sort_keys=True) + "\n")
    summary = {
        "records": len(records),
        "failed": sum(r.failed for r in records),
        "metrics": metrics.to_dict(),
        "strategy": (config or {}).get("strategy"),
        "config": config or {},
        "config_hash": config_hash,
    }
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    timing_summary = {
        "records": len(records),
        "mean_embed_s": _mean([r.timings.embed_s for r in records]),
        "mean_retrieval_s": _mean([r.timings.retrieval_s for r in records]),
        "mean_generation_s": _mean([r.timings.generation_s for r in records]),
        "config_hash": config_hash,
    }
    files["timing_summary"].write_text(json.dumps(timing_summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return files
