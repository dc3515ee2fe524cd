"""Generation backends: anything that continues a prompt until a stop sequence.

Returned text always INCLUDES the stop sequence that ended it, so the rollout
parser sees the closing tag.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import requests

from .protocol import STOP_SEQUENCES
from .retriever import Passage

logger = logging.getLogger(__name__)

UNKNOWN_ANSWER = "unknown"

ANSWER_PROMPT_VERSION = "answer-v1"
ANSWER_PROMPT = (
    "Answer the question using the passages below. "
    "Answer in a few words, without explanation.\n\n"
    "{passages}\n\n"
    "Question: {question}\n"
    "Answer:"
)


class GenerationError(RuntimeError):
    pass


class TransportError(GenerationError):
    """Network-level failure that survived every retry."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class RemoteStatusError(GenerationError):
    def __init__(self, status: int, body: str):
        super().__init__(f"completion endpoint returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body[:200]


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    stop_sequences: tuple[str, ...] = STOP_SEQUENCES
    max_tokens: int = 512
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


@dataclass(frozen=True)
class GenerationChunk:
    text: str
    finish_reason: str  # "stop" | "length" | "end"
    token_logprobs: tuple[tuple[str, float], ...] | None = None

    @property
    def token_count(self) -> int | None:
        return None if self.token_logprobs is None else len(self.token_logprobs)


def apply_stop(text: str, stop_sequences: Sequence[str]) -> tuple[str, bool]:
    """Cut *text* just after the earliest stop sequence occurrence.

    Returns the (possibly shortened) text and whether a stop sequence matched.
    When two sequences end at different offsets, the one whose match ends
    first wins.
    """
    best = None
    for s in stop_sequences:
        if not s:
            continue
        i = text.find(s)
        if i >= 0 and (best is None or i + len(s) < best):
            best = i + len(s)
    if best is None:
        return text, False
    return text[:best], True


class Policy:
    """Base for generation backends.

    ``for_episode`` hands out a handle used for one episode; stateless
    backends return themselves.
    """

    def generate(self, request: GenerationRequest) -> GenerationChunk:
        raise NotImplementedError

    def for_episode(self, question: str) -> "Policy":
        return self


class _ScriptCursor(Policy):
    def __init__(self, steps: Sequence[str]):
        self._steps = list(steps)
        self._pos = 0
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> GenerationChunk:
        with self._lock:
            if self._pos >= len(self._steps):
                return GenerationChunk("", "end")
            step = self._steps[self._pos]
            self._pos += 1
        text, stopped = apply_stop(step, request.stop_sequences)
        if stopped:
            return GenerationChunk(text, "stop")
        words = list(re.finditer(r"\S+", text))
        if len(words) > request.max_tokens:
            return GenerationChunk(text[: words[request.max_tokens].start()], "length")
        return GenerationChunk(text, "end")


class ScriptedPolicy(Policy):
    """Replays canned segments.

    *steps* is the default script; *episodes* maps a question to its own
    script. Each ``for_episode`` call starts a fresh cursor, so concurrent
    episodes never interleave. Calling ``generate`` on the policy itself walks
    the default script with a shared cursor.
    """

    def __init__(self, steps: Sequence[str] = (), episodes: dict[str, Sequence[str]] | None = None):
        self.steps = list(steps)
        self.episodes = {q: list(s) for q, s in (episodes or {}).items()}
        self._default = _ScriptCursor(self.steps)

    def generate(self, request: GenerationRequest) -> GenerationChunk:
        return self._default.generate(request)

    def for_episode(self, question: str) -> Policy:
        return _ScriptCursor(self.episodes.get(question, self.steps))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        """Load ``{"default": [...], "episodes": {question: [...]}}``."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            return cls(data)
        return cls(data.get("default", []), data.get("episodes", {}))


def _infer_stop(text: str, stop_sequences: Sequence[str]) -> str | None:
    """Guess which closing tag a server stripped, from the last unclosed opening tag."""
    best, best_pos = None, -1
    for s in stop_sequences:
        if s.startswith("</") and s.endswith(">"):
            opener = "<" + s[2:]
            pos = text.rfind(opener)
            if pos > best_pos and text.find(s, pos) < 0:
                best, best_pos = s, pos
    return best


class CompletionClient(Policy):
    """Client for an OpenAI-compatible ``/completions`` endpoint.

    Transport errors and 5xx responses are retried with exponential backoff
    up to ``max_attempts`` total attempts; other non-2xx statuses fail at once.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        logprobs: bool = False,
        session: requests.Session | None = None,
    ):
        self.url = base_url.rstrip("/") + "/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("AGENTRAG_API_KEY")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.logprobs = logprobs
        self.session = session or requests.Session()

    def _payload(self, request: GenerationRequest) -> dict:
        return {
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "stop": list(request.stop_sequences),
            "logprobs": 1 if self.logprobs else None,
        }

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = f"transport error: {e}"
            else:
                if resp.status_code // 100 == 2:
                    try:
                        return resp.json()
                    except ValueError as e:
                        raise GenerationError(f"completion endpoint returned invalid JSON: {e}") from e
                if resp.status_code < 500:
                    raise RemoteStatusError(resp.status_code, resp.text)
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if attempt < self.max_attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                logger.warning("completion attempt %d failed (%s); retrying in %.2fs", attempt, last_error, delay)
                time.sleep(delay)
        raise TransportError(last_error, self.max_attempts)

    def generate(self, request: GenerationRequest) -> GenerationChunk:
        data = self._post(self._payload(request))
        try:
            choice = data["choices"][0]
            text = choice.get("text") or ""
            reason = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as e:
            raise GenerationError(f"malformed completion response: {e}") from e

        token_logprobs = None
        lp = choice.get("logprobs")
        if isinstance(lp, dict) and lp.get("tokens") is not None:
            token_logprobs = tuple(zip(lp["tokens"], lp.get("token_logprobs") or []))

        if reason == "length":
            return GenerationChunk(text, "length", token_logprobs)
        # Servers usually strip the matched stop string; put it back.
        cut, stopped = apply_stop(text, request.stop_sequences)
        if stopped:
            return GenerationChunk(cut, "stop", token_logprobs)
        if reason == "stop":
            matched = choice.get("stop_reason")
            if not (isinstance(matched, str) and matched in request.stop_sequences):
                matched = _infer_stop(text, request.stop_sequences)
            if matched is not None:
                return GenerationChunk(text + matched, "stop", token_logprobs)
        return GenerationChunk(text, "end", token_logprobs)


# Frozen generators: answer a question from a passage set.


class Generator:
    def answer(self, question: str, passages: Sequence[Passage]) -> str:
        raise NotImplementedError


class ScriptedGenerator(Generator):
    """Canned answers keyed on the question; ``unknown`` otherwise."""

    def __init__(self, answers: dict[str, str] | None = None, default: str = UNKNOWN_ANSWER):
        self.answers = dict(answers or {})
        self.default = default

    def answer(self, question: str, passages: Sequence[Passage]) -> str:
        return self.answers.get(question, self.default)


class ExtractiveGenerator(Generator):
    """Reads answers out of the passages.

    For each question, the known candidate strings are tried in order and the
    first one occurring in a passage (case-insensitive) is returned as
    written. Models a reader that never misses evidence that is present.
    """

    def __init__(self, candidates: dict[str, Sequence[str]], default: str = UNKNOWN_ANSWER):
        self.candidates = {q: list(c) for q, c in candidates.items()}
        self.default = default

    def answer(self, question: str, passages: Sequence[Passage]) -> str:
        haystacks = [p.contents.casefold() for p in passages]
        for cand in self.candidates.get(question, ()):
            if any(cand.casefold() in h for h in haystacks):
                return cand
        return self.default


@dataclass
class CompletionGenerator(Generator):
    """Frozen reader backed by any ``Policy`` through a fixed answer prompt."""

    policy: Policy
    max_tokens: int = 32
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = field(default=("\n",))

    def answer(self, question: str, passages: Sequence[Passage]) -> str:
        chunk = self.policy.generate(
            GenerationRequest(
                prompt=render_answer_prompt(question, passages),
                stop_sequences=self.stop_sequences,
                max_tokens=self.max_tokens,
                temperature=self.temperature,
            )
        )
        text = chunk.text
        for s in self.stop_sequences:
            if chunk.finish_reason == "stop" and text.endswith(s):
                text = text[: -len(s)]
                break
        return text.strip() or UNKNOWN_ANSWER


def render_answer_prompt(question: str, passages: Iterable[Passage]) -> str:
    docs = "\n\n".join(f"Doc {i}: {p.contents}" for i, p in enumerate(passages, 1))
    return ANSWER_PROMPT.format(passages=docs or "(no passages)", question=question)


def frozen_generate(generator: Generator, question: str, passages: Sequence[Passage]) -> str:
    return generator.answer(question, list(passages))
