"""Matching questions, prompt templates and answer parsing.

Templates are plain text files with a ``[system]`` and a ``[user]``
section. ``{question}`` is replaced by the question text and, for the
KG-augmented matcher, ``{paths}`` by the verbalised subgraph. Substitution
is literal (no ``str.format``) so braces inside few-shot examples survive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import FormatError, TemplateError

PROMPT_KINDS = ("matcher", "rag_matcher", "entity_retriever", "subgraph_retriever")
KG_CONTEXT_MARKER = "Knowledge graph context:"

_REQUIRED = {
    "matcher": ("{question}",),
    "rag_matcher": ("{question}", "{paths}"),
    "entity_retriever": ("{question}",),
    "subgraph_retriever": ("{question}",),
}
_PLACEHOLDERS = ("{question}", "{paths}")


@dataclass(frozen=True)
class MatchQuestion:
    source_attr: str
    target_attr: str
    desc_source: str = ""
    desc_target: str = ""
    label: int | None = None
    question_id: str = ""

    def __post_init__(self):
        if not self.source_attr.strip() or not self.target_attr.strip():
            raise ValueError("attribute names must be non-empty")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    def text(self) -> str:
        def clause(n: int, name: str, desc: str) -> str:
            desc = desc.strip()
            return f"Attribute{n}: {name}, Description: {desc}" if desc else f"Attribute{n}: {name}"

        return (
            f"{clause(1, self.source_attr, self.desc_source)}; "
            f"{clause(2, self.target_attr, self.desc_target)}. "
            "Are they semantically matched?"
        )


def build_question(record: Mapping[str, object] | Iterable, question_id: str = "") -> MatchQuestion:
    """Make a question from a dataset row.

    ``record`` is either a mapping with ``source_attr``, ``target_attr``,
    ``desc_source``, ``desc_target`` and ``label`` keys, or a sequence in
    dataset column order (source, target, description 1, description 2, label).
    """
    if isinstance(record, Mapping):
        row = [record.get(k, "") for k in ("source_attr", "target_attr", "desc_source", "desc_target", "label")]
    else:
        row = list(record)
        row += [""] * (5 - len(row))
    src, tgt, d1, d2, label = (str(v).strip() if v is not None else "" for v in row[:5])
    if not src or not tgt:
        raise FormatError("row is missing an attribute name")
    if label == "":
        lab = None
    elif label in ("0", "1"):
        lab = int(label)
    else:
        raise FormatError(f"label must be 0 or 1, got {label!r}")
    return MatchQuestion(src, tgt, d1, d2, lab, question_id)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.6
    top_p: float = 0.9
    top_k: int = 1
    max_new_tokens: int = 4096


@dataclass(frozen=True)
class PromptPayload:
    system_text: str
    user_text: str
    params: SamplingParams = field(default_factory=SamplingParams)


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    system: str
    user: str

    def render(self, question: str, paths: str | None = None) -> tuple[str, str]:
        # split first so placeholder-like text inside values is never expanded
        return (
            _join_sub(_split_keep(self.system), question, paths),
            _join_sub(_split_keep(self.user), question, paths),
        )


def _split_keep(s: str) -> list[str]:
    return re.split(r"(\{question\}|\{paths\})", s)


def _join_sub(parts: list[str], question: str, paths: str | None) -> str:
    out = []
    for p in parts:
        if p == "{question}":
            out.append(question)
        elif p == "{paths}":
            out.append(paths if paths is not None else p)
        else:
            out.append(p)
    return "".join(out)


def parse_template(text: str, kind: str) -> PromptTemplate:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        tag = line.strip().lower()
        if tag in ("[system]", "[user]"):
            current = tag[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    if "user" not in sections:
        raise TemplateError(f"{kind} template has no [user] section")
    system = "\n".join(sections.get("system", [])).strip()
    user = "\n".join(sections["user"]).strip()
    tmpl = PromptTemplate(kind, system, user)
    validate_template(tmpl)
    return tmpl


def validate_template(tmpl: PromptTemplate) -> None:
    both = tmpl.system + "\n" + tmpl.user
    for ph in _REQUIRED[tmpl.kind]:
        if ph not in both:
            raise TemplateError(f"{tmpl.kind} template is missing the {ph} placeholder")
    if tmpl.kind != "rag_matcher" and "{paths}" in both:
        raise TemplateError(f"{tmpl.kind} template must not contain {{paths}}")


class PromptTemplates:
    """The four prompt templates, packaged defaults optionally overridden from a directory."""

    def __init__(self, templates: Mapping[str, PromptTemplate]):
        missing = set(PROMPT_KINDS) - set(templates)
        if missing:
            raise TemplateError(f"missing templates: {sorted(missing)}")
        self._t = dict(templates)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> PromptTemplates:
        out = {}
        pkg = resources.files("kgmatch") / "templates"
        for kind in PROMPT_KINDS:
            override = Path(directory) / f"{kind}.txt" if directory else None
            if override is not None and override.exists():
                text = override.read_text(encoding="utf-8")
            else:
                text = (pkg / f"{kind}.txt").read_text(encoding="utf-8")
            out[kind] = parse_template(text, kind)
        return cls(out)

    def __getitem__(self, kind: str) -> PromptTemplate:
        return self._t[kind]


_DEFAULT_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.load()
    return _DEFAULT_TEMPLATES


def build_prompt(
    kind: str,
    question: MatchQuestion | str,
    context: str | None = None,
    templates: PromptTemplates | None = None,
    params: SamplingParams | None = None,
) -> PromptPayload:
    if kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}")
    if kind == "rag_matcher" and not context:
        raise ValueError("rag_matcher prompt requires a non-empty KG context")
    tmpl = (templates or default_templates())[kind]
    qtext = question.text() if isinstance(question, MatchQuestion) else question
    system, user = tmpl.render(qtext, context if kind == "rag_matcher" else None)
    return PromptPayload(system, user, params or SamplingParams())


# ------------------------------------------------------------------- paths

def _node(store, ident: str, kind: str) -> str:
    label = store.label_of(ident, kind) if store is not None else ident
    return ident if label == ident else f"{label} ({ident})"


def verbalize_hop(hop, store) -> str:
    return ", ".join(
        (_node(store, hop.head, "entity"), _node(store, hop.relation, "relation"), _node(store, hop.tail, "entity"))
    )


def verbalize_paths(paths, store) -> str:
    """Render paths one per line; hops within a path are joined by `` → ``.

    Accepts ranked paths (anything with a ``.path``) or bare paths.
    """
    lines = []
    for p in paths:
        path = getattr(p, "path", p)
        lines.append(" → ".join(verbalize_hop(h, store) for h in path.hops))
    return "\n".join(lines)


# ------------------------------------------------------------------ answers

@dataclass(frozen=True)
class MatchDecision:
    verdict: str  # "positive" | "negative"
    raw_text: str
    parse_status: str  # "clean" | "fallback" | "unparseable"

    @property
    def positive(self) -> bool:
        return self.verdict == "positive"


_LEAD = re.compile(r"^[\s>*_`\"'#\-]*(?:answer\s*[:：]\s*[*_`\"']*)?(1|0|yes|no)\b", re.IGNORECASE)
_ANSWER = re.compile(r"answer\s*(?:is)?\s*[:：]?\s*[*_`\"']*\s*(1|0|yes|no)\b", re.IGNORECASE)


def _verdict(tok: str) -> str:
    return "positive" if tok.lower() in ("1", "yes") else "negative"


def parse_answer(raw: str) -> MatchDecision:
    """Map LLM text to a binary verdict.

    The first non-blank line is checked for a leading 1/yes or 0/no; failing
    that, the whole text is searched for ``answer: 1``-style phrasing.
    Anything else is recorded as a negative with ``unparseable`` status.
    """
    first = next((ln for ln in raw.splitlines() if ln.strip()), "")
    m = _LEAD.match(first)
    if m:
        return MatchDecision(_verdict(m.group(1)), raw, "clean")
    m = _ANSWER.search(raw)
    if m:
        return MatchDecision(_verdict(m.group(1)), raw, "fallback")
    return MatchDecision("negative", raw, "unparseable")
