"""Tag grammar spoken between the agent and the environment.

Vocabulary (lowercase, no attributes)::

    <plan> <search> <query> <information> <reflection> <answer>

Whitespace between tags is free; nesting is strict. Only ``<query>`` may nest,
and only inside ``<search>``. The body of an ``<information>`` element is
opaque: tags inside retrieved passages are never interpreted.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

from .retriever import Passage

TAGS = ("plan", "search", "query", "information", "reflection", "answer")
STOP_SEQUENCES = ("</search>", "</answer>")
MAX_QUERIES = 3
NO_RESULTS = "No results found."

_TAG_RE = re.compile(r"<(/?)(plan|search|query|information|reflection|answer)>")
_QUERY_RE = re.compile(r"<query>(.*?)</query>", re.S)
_SEARCH_RE = re.compile(r"<search>(.*?)</search>", re.S)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
_DOC_HEAD_RE = re.compile(r'Doc (\d+) \(Title: "(.*?)"\) ', re.S)


@dataclass(frozen=True)
class Search:
    queries: tuple[str, ...]
    violations: tuple["Violation", ...] = ()


@dataclass(frozen=True)
class Answer:
    text: str


@dataclass(frozen=True)
class Malformed:
    reason: str


AgentAction = Union[Search, Answer, Malformed]


@dataclass(frozen=True)
class Violation:
    position: int
    rule: str


@dataclass(frozen=True)
class FormatReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class InformationBlock:
    passages: tuple[Passage, ...] = ()
    source_queries: tuple[str, ...] = ()

    def __post_init__(self):
        keys = [dedup_key(p.text) for p in self.passages]
        if len(set(keys)) != len(keys):
            raise ValueError("information block contains duplicate passages")


@dataclass(frozen=True)
class Element:
    """A top-level tagged element located in a transcript."""

    name: str
    start: int  # offset of the opening '<'
    end: int  # offset just past the closing '>'
    body_start: int
    body_end: int
    children: tuple["Element", ...] = field(default=())


def dedup_key(text: str) -> str:
    """Whitespace-collapsed, case-folded passage text."""
    return " ".join(text.split()).casefold()


def dedup_passages(passages: Iterable[Passage]) -> list[Passage]:
    seen = set()
    out = []
    for p in passages:
        key = dedup_key(p.text)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def scan(text: str) -> tuple[list[Element], list[Violation]]:
    """Locate top-level elements and nesting violations.

    Misplaced tags are reported and otherwise ignored, so one stray tag does
    not hide the well-formed elements around it.
    """
    elements: list[Element] = []
    violations: list[Violation] = []
    # (name, match) of the open top-level element and, for search, the open query
    top = None
    query_open = None
    children: list[Element] = []
    for m in _TAG_RE.finditer(text):
        closing, name = m.group(1) == "/", m.group(2)
        if top is None:
            if closing:
                violations.append(Violation(m.start(), "unbalanced-close"))
            elif name == "query":
                violations.append(Violation(m.start(), "query-outside-search"))
            else:
                top, children = (name, m), []
            continue
        top_name, top_m = top
        if top_name == "information":
            if closing and name == "information":
                elements.append(Element(name, top_m.start(), m.end(), top_m.end(), m.start()))
                top = None
            continue
        if query_open is not None:
            if closing and name == "query":
                children.append(Element("query", query_open.start(), m.end(), query_open.end(), m.start()))
                query_open = None
            else:
                violations.append(Violation(m.start(), "bad-nesting"))
            continue
        if closing and name == top_name:
            elements.append(Element(name, top_m.start(), m.end(), top_m.end(), m.start(), tuple(children)))
            top = None
        elif top_name == "search" and name == "query" and not closing:
            query_open = m
        else:
            violations.append(Violation(m.start(), "bad-nesting"))
    if query_open is not None:
        violations.append(Violation(query_open.start(), "unclosed-tag"))
    if top is not None:
        violations.append(Violation(top[1].start(), "unclosed-tag"))
    return elements, violations


def information_spans(text: str) -> list[tuple[int, int]]:
    """Character spans ``[start, end)`` of well-formed top-level information elements, tags included."""
    elements, _ = scan(text)
    return [(e.start, e.end) for e in elements if e.name == "information"]


def extract_queries(search_block: str, violations: list[Violation] | None = None) -> list[str]:
    """Query texts inside a search element's interior, trimmed, in order.

    At most ``MAX_QUERIES`` are kept; overflow is reported as a ``query-cap``
    violation appended to *violations* when a list is given.
    """
    queries = [q.strip() for q in _QUERY_RE.findall(search_block)]
    queries = [q for q in queries if q]
    if not queries:
        raise ValueError("empty search")
    if len(queries) > MAX_QUERIES:
        if violations is not None:
            violations.append(Violation(0, "query-cap"))
        queries = queries[:MAX_QUERIES]
    return queries


def parse_segment(text: str) -> AgentAction:
    """Classify one generated segment as a search, an answer or malformed output."""
    m = _SEARCH_RE.search(text)
    if m:
        found: list[Violation] = []
        try:
            queries = extract_queries(m.group(1), found)
        except ValueError:
            return Malformed("empty search")
        shifted = tuple(Violation(m.start(1) + v.position, v.rule) for v in found)
        return Search(tuple(queries), shifted)
    m = _ANSWER_RE.search(text)
    if m:
        return Answer(m.group(1).strip())
    return Malformed("no terminal tag")


def element_text(text: str, name: str, last: bool = False) -> str | None:
    """Trimmed body of the first (or last) top-level *name* element in *text*."""
    found = [e for e in scan(text)[0] if e.name == name]
    if not found:
        return None
    e = found[-1] if last else found[0]
    return text[e.body_start:e.body_end].strip()


def render_information(block: InformationBlock) -> str:
    if not block.passages:
        return f"<information>\n{NO_RESULTS}\n</information>"
    docs = "\n\n".join(f'Doc {i} (Title: "{p.title}") {p.text}' for i, p in enumerate(block.passages, 1))
    return f"<information>\n{docs}\n</information>"


def parse_information(rendered: str) -> list[tuple[str, str]]:
    """Recover ``(title, text)`` pairs from a rendered information element.

    Doc headers are matched in sequence (``Doc 1``, ``Doc 2``, ...), so a
    passage body may itself mention "Doc" without confusing the parser.
    """
    body = rendered.strip()
    if not (body.startswith("<information>\n") and body.endswith("\n</information>")):
        raise ValueError("not a rendered information element")
    body = body[len("<information>\n"):-len("\n</information>")]
    if body == NO_RESULTS:
        return []
    heads = []
    m = _DOC_HEAD_RE.match(body)
    while m is not None and int(m.group(1)) == len(heads) + 1:
        heads.append(m)
        idx = body.find(f'\n\nDoc {len(heads) + 1} (Title: "', m.end())
        m = _DOC_HEAD_RE.match(body, idx + 2) if idx >= 0 else None
    if not heads:
        raise ValueError("no Doc entries in information element")
    out = []
    for i, m in enumerate(heads):
        end = heads[i + 1].start() - 2 if i + 1 < len(heads) else len(body)
        out.append((m.group(2), body[m.end():end]))
    return out


def validate_format(trajectory_text: str) -> FormatReport:
    """Check a full transcript against the plan/search/information/reflection/answer loop.

    Rules: each search directly follows a closed plan; each information block
    is directly followed by a closed reflection; exactly one answer, placed
    last; all tags nested and closed. "Directly" permits whitespace only.
    """
    elements, violations = scan(trajectory_text)
    violations = list(violations)

    def gap_is_blank(a: Element, b: Element) -> bool:
        return not trajectory_text[a.end:b.start].strip()

    for i, e in enumerate(elements):
        if e.name == "search":
            prev = elements[i - 1] if i else None
            if prev is None or prev.name != "plan" or not gap_is_blank(prev, e):
                violations.append(Violation(e.start, "search-without-plan"))
        elif e.name == "information":
            nxt = elements[i + 1] if i + 1 < len(elements) else None
            if nxt is None or nxt.name != "reflection" or not gap_is_blank(e, nxt):
                violations.append(Violation(e.end, "missing-reflection"))
    answers = [e for e in elements if e.name == "answer"]
    if len(answers) != 1:
        pos = answers[1].start if len(answers) > 1 else len(trajectory_text)
        violations.append(Violation(pos, "answer-count"))
    if answers and (elements[-1] is not answers[-1] or trajectory_text[answers[-1].end:].strip()):
        violations.append(Violation(answers[-1].end, "answer-not-last"))
    violations.sort(key=lambda v: (v.position, v.rule))
    return FormatReport(tuple(violations))


def parse_doc_set(trajectory) -> list[Passage]:
    """Union of passages over all information blocks, first occurrence wins."""
    return dedup_passages(p for turn in trajectory.turns if turn.information for p in turn.information.passages)
