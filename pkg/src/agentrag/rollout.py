"""Multi-turn plan/search/information/reflection rollout.

One episode alternates policy segments with retrieval until the agent
answers or a budget runs out. ``Trajectory.full_text`` is the exact
concatenation of every policy segment, rendered information block and retry
prompt, in order; the instruction prompt is not part of it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from . import protocol
from .policy import GenerationChunk, GenerationError, GenerationRequest, Generator, Policy, frozen_generate
from .protocol import Answer, InformationBlock, Malformed, Search
from .retriever import Passage, Retriever, RetrieverError

PROMPT_VERSION = "agent-v1"
RETRY_PROMPT = (
    "Your previous output had invalid format. Continue, using <search>…</search> or <answer>…</answer>."
)

AGENT_PROMPT = """\
You answer questions with the help of a search tool.

Output format:
- <plan>...</plan> states what evidence is still missing. A plan comes right before every search.
- <search><query>...</query></search> sends one to three queries, each in its own <query> element.
- The tool replies with <information>...</information>; never write that block yourself.
- <reflection>...</reflection> follows every information block and says what the evidence settles.
- <answer>...</answer> ends the episode: a short phrase, no explanation.

Example final answer:
<answer>
Paris
</answer>

Question: {question}
"""

TERMINATIONS = ("answered", "budget_exhausted", "token_limit", "policy_end")


@dataclass(frozen=True)
class RolloutConfig:
    max_turns: int = 4
    passages_per_query: int = 1
    retry_prompt: str = RETRY_PROMPT
    max_total_tokens: int = 8192
    max_response_tokens: int = 512
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.passages_per_query < 1:
            raise ValueError("passages_per_query must be >= 1")
        if self.max_total_tokens < 1 or self.max_response_tokens < 1:
            raise ValueError("token budgets must be positive")


@dataclass
class Turn:
    raw_segment: str
    kind: str  # "search" | "answer" | "retry"
    plan_text: str | None = None
    search: Search | None = None
    information: InformationBlock | None = None
    reflection_text: str | None = None

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "raw_segment": self.raw_segment, "plan": self.plan_text, "reflection": self.reflection_text}
        rec["queries"] = list(self.search.queries) if self.search else None
        rec["information"] = (
            [p.to_record() for p in self.information.passages] if self.information is not None else None
        )
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Turn":
        info = rec.get("information")
        queries = rec.get("queries")
        return cls(
            raw_segment=rec["raw_segment"],
            kind=rec["kind"],
            plan_text=rec.get("plan"),
            search=Search(tuple(queries)) if queries is not None else None,
            information=(
                InformationBlock(tuple(Passage.from_record(p) for p in info), tuple(queries or ()))
                if info is not None
                else None
            ),
            reflection_text=rec.get("reflection"),
        )


@dataclass
class Trajectory:
    question: str
    turns: list[Turn] = field(default_factory=list)
    agent_answer: str | None = None
    info_set: list[Passage] = field(default_factory=list)
    full_text: str = ""
    termination: str | None = None
    tokens_used: int = 0

    def to_record(self, generator_answer: str | None = None, rewards: dict | None = None) -> dict:
        rec = {
            "question": self.question,
            "turns": [t.to_record() for t in self.turns],
            "termination": self.termination,
            "agent_answer": self.agent_answer,
            "generator_answer": generator_answer,
            "info_set": [p.to_record() for p in self.info_set],
            "full_text": self.full_text,
        }
        if rewards is not None:
            rec["rewards"] = rewards
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            question=rec["question"],
            turns=[Turn.from_record(t) for t in rec["turns"]],
            agent_answer=rec.get("agent_answer"),
            info_set=[Passage.from_record(p) for p in rec.get("info_set", [])],
            full_text=rec["full_text"],
            termination=rec.get("termination"),
        )


class EpisodeError(RuntimeError):
    """An episode died mid-way; ``partial`` holds what was recorded so far."""

    def __init__(self, message: str, partial: Trajectory):
        super().__init__(message)
        self.partial = partial


def render_prompt(question: str) -> str:
    return AGENT_PROMPT.format(question=question)


def estimate_tokens(text: str) -> int:
    """Rough token count when the backend reports none: whitespace tokens x 1.3."""
    return math.ceil(len(text.split()) * 1.3)


def aggregate_context(queries: Sequence[str], retriever: Retriever, passages_per_query: int) -> InformationBlock:
    """Top passages for each query, concatenated in query order, then deduplicated."""
    if not 1 <= len(queries) <= protocol.MAX_QUERIES:
        raise ValueError(f"expected 1..{protocol.MAX_QUERIES} queries, got {len(queries)}")
    found: list[Passage] = []
    for q in queries:
        try:
            found.extend(retriever.search(q, passages_per_query))
        except RetrieverError:
            raise
        except Exception as e:
            raise RetrieverError(f"retrieval failed: {e}", q) from e
    return InformationBlock(tuple(protocol.dedup_passages(found)), tuple(queries))


def _generate(policy: Policy, request: GenerationRequest, traj: Trajectory) -> GenerationChunk:
    try:
        return policy.generate(request)
    except GenerationError as e:
        raise EpisodeError(f"policy failed: {e}", traj) from e


def run_episode(
    question: str,
    policy: Policy,
    retriever: Retriever,
    config: RolloutConfig | None = None,
) -> Trajectory:
    """Run one episode. Every generated segment, retries included, uses up one turn."""
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    config = config or RolloutConfig()
    prompt = render_prompt(question)
    handle = policy.for_episode(question)
    traj = Trajectory(question=question, tokens_used=estimate_tokens(prompt))

    def append(text: str, tokens: int | None = None):
        traj.full_text += text
        traj.tokens_used += estimate_tokens(text) if tokens is None else tokens

    while len(traj.turns) < config.max_turns:
        remaining = config.max_total_tokens - traj.tokens_used
        if remaining <= 0:
            traj.termination = "token_limit"
            break
        request = GenerationRequest(
            prompt=prompt + traj.full_text,
            stop_sequences=protocol.STOP_SEQUENCES,
            max_tokens=min(config.max_response_tokens, remaining),
            temperature=config.temperature,
            top_p=config.top_p,
        )
        chunk = _generate(handle, request, traj)
        segment = chunk.text
        if chunk.finish_reason == "end" and not segment:
            traj.termination = "policy_end"
            break
        append(segment, chunk.token_count)

        # A reflection on the previous round's information arrives at the head of this segment.
        prev = traj.turns[-1] if traj.turns else None
        if prev is not None and prev.information is not None and prev.reflection_text is None:
            prev.reflection_text = protocol.element_text(segment, "reflection")

        action = protocol.parse_segment(segment)
        if isinstance(action, Search):
            try:
                block = aggregate_context(action.queries, retriever, config.passages_per_query)
            except RetrieverError as e:
                raise EpisodeError(str(e), traj) from e
            traj.turns.append(
                Turn(segment, "search", protocol.element_text(segment, "plan", last=True), action, block)
            )
            append(protocol.render_information(block))
            traj.info_set = protocol.dedup_passages([*traj.info_set, *block.passages])
        elif isinstance(action, Answer):
            traj.turns.append(Turn(segment, "answer", protocol.element_text(segment, "plan", last=True)))
            traj.agent_answer = action.text
            traj.termination = "answered"
            break
        else:
            traj.turns.append(Turn(segment, "retry"))
            append(config.retry_prompt)
    if traj.termination is None:
        traj.termination = "budget_exhausted"
    return traj


def finalize_with_generator(trajectory: Trajectory, question: str, generator: Generator) -> str:
    """Frozen reader's answer from the question and the trajectory's passage set."""
    return frozen_generate(generator, question, trajectory.info_set)


def dumps_record(record: dict) -> str:
    """Canonical one-line JSON used for every trace file (stable key order)."""
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def write_traces(records: Iterable[dict], fp: IO[str]) -> None:
    for rec in records:
        fp.write(dumps_record(rec) + "\n")


def read_traces(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"line {lineno}: invalid trace record ({e.msg})") from e
    return out
