"""Answer metrics and the two training-stage rewards."""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Union

from .protocol import validate_format

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)

HIT_WEIGHT = 0.5


@dataclass(frozen=True)
class GoldAnswerSet:
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("gold answer set is empty")
        for a in self.answers:
            if not isinstance(a, str) or not normalize_answer(a):
                raise ValueError(f"gold answer {a!r} is empty after normalization")

    @classmethod
    def of(cls, gold: "GoldLike") -> "GoldAnswerSet":
        if isinstance(gold, GoldAnswerSet):
            return gold
        if isinstance(gold, str):
            return cls((gold,))
        return cls(tuple(gold))


GoldLike = Union[GoldAnswerSet, str, Iterable[str]]


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def em_strict(prediction: str, gold: GoldLike) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in GoldAnswerSet.of(gold).answers))


def em_contains(prediction: str, gold: GoldLike) -> int:
    pred = normalize_answer(prediction)
    return int(any(normalize_answer(g) in pred for g in GoldAnswerSet.of(gold).answers))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, gold: GoldLike) -> float:
    pred = normalize_answer(prediction).split()
    return max(_f1(pred, normalize_answer(g).split()) for g in GoldAnswerSet.of(gold).answers)


def hit(trajectory, gold: GoldLike) -> int:
    """1 when any gold answer occurs anywhere in the trajectory text."""
    text = normalize_answer(trajectory.full_text)
    return int(any(normalize_answer(g) in text for g in GoldAnswerSet.of(gold).answers))


def stage1_reward(trajectory, gold: GoldLike) -> float:
    """Format-gated strict exact match on the agent's own answer."""
    if trajectory.agent_answer is None:
        return 0.0
    if not validate_format(trajectory.full_text).valid:
        return 0.0
    return float(em_strict(trajectory.agent_answer, gold))


def stage2_reward(trajectory, generator_answer: str, gold: GoldLike) -> float:
    """Containment match on the frozen reader's answer plus a half-weight trajectory hit."""
    return em_contains(generator_answer, gold) + HIT_WEIGHT * hit(trajectory, gold)


@dataclass(frozen=True)
class RewardBreakdown:
    format_ok: bool
    em_strict: int
    em_contains: int
    f1: float
    hit: int
    stage1: float
    stage2: float

    def to_record(self) -> dict:
        return asdict(self)


def score_trajectory(trajectory, gold: GoldLike, generator_answer: str | None = None) -> RewardBreakdown:
    """All signals for one trajectory; EM/F1 fields score the agent's answer.

    Without a generator answer, stage2 counts only the hit term.
    """
    gold = GoldAnswerSet.of(gold)
    answer = trajectory.agent_answer or ""
    fmt = validate_format(trajectory.full_text).valid
    return RewardBreakdown(
        format_ok=fmt,
        em_strict=em_strict(answer, gold) if trajectory.agent_answer is not None else 0,
        em_contains=em_contains(answer, gold) if trajectory.agent_answer is not None else 0,
        f1=token_f1(answer, gold),
        hit=hit(trajectory, gold),
        stage1=stage1_reward(trajectory, gold),
        stage2=stage2_reward(trajectory, generator_answer or "", gold),
    )
