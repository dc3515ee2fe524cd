"""Group-relative policy optimization math over recorded token traces.

Evaluates the clipped surrogate objective, advantages and KL penalty for
groups of rollouts; it never updates parameters. Tokens inside retrieved
information blocks carry ``mask=False`` and are left out of every sum and
every token count.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .protocol import information_spans

logger = logging.getLogger(__name__)

_PIECE_RE = re.compile(r"</?[a-z]+>|\s+|[^\s<]+|<")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class GrpoParams:
    epsilon: float = 0.2
    beta: float = 0.001
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")


@dataclass
class TokenTrace:
    tokens: list[str]
    logp_new: np.ndarray
    logp_old: np.ndarray
    mask: np.ndarray
    logp_ref: np.ndarray | None = None

    def __post_init__(self):
        self.logp_new = np.asarray(self.logp_new, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.logp_ref is not None:
            self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        n = len(self.tokens)
        lengths = {"logp_new": len(self.logp_new), "logp_old": len(self.logp_old), "mask": len(self.mask)}
        if self.logp_ref is not None:
            lengths["logp_ref"] = len(self.logp_ref)
        bad = {k: v for k, v in lengths.items() if v != n}
        if bad:
            detail = ", ".join(f"{k}={v}" for k, v in bad.items())
            raise TraceError(f"per-token lists disagree with {n} tokens: {detail}")

    @property
    def n_unmasked(self) -> int:
        return int(self.mask.sum())


@dataclass
class GroupTrace:
    rollouts: list[TokenTrace]
    rewards: list[float]
    question_id: str = ""

    def __post_init__(self):
        if len(self.rollouts) != len(self.rewards):
            raise TraceError(f"{len(self.rollouts)} rollouts but {len(self.rewards)} rewards")
        if len(self.rollouts) < 2:
            raise TraceError("a group needs at least 2 rollouts")


@dataclass
class ObjectiveDiagnostics:
    clip_fraction: float
    mean_ratio: float
    kl: float
    n_tokens: int
    notes: list[str] = field(default_factory=list)


def group_advantages(rewards: Sequence[float], sigma_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with population std; all zeros when std < sigma_floor."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 rewards")
    std = r.std()
    if std < sigma_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _k3(logp_new: np.ndarray, logp_ref: np.ndarray) -> np.ndarray:
    d = logp_ref - logp_new
    return np.maximum(np.expm1(d) - d, 0.0)


def kl_estimate(trace: TokenTrace) -> float:
    """Mean over unmasked tokens of ``exp(d) - d - 1`` with ``d = logp_ref - logp_new``."""
    if trace.logp_ref is None:
        raise TraceError("kl_estimate needs reference logprobs")
    m = trace.mask
    if not m.any():
        logger.warning("kl_estimate: no unmasked tokens")
        return 0.0
    return float(_k3(trace.logp_new[m], trace.logp_ref[m]).mean())


def grpo_objective(
    group: GroupTrace, advantages: Sequence[float], params: GrpoParams | None = None
) -> tuple[float, ObjectiveDiagnostics]:
    """Clipped surrogate averaged over all unmasked tokens of the group, minus ``beta * KL``.

    The KL term is the same token-weighted mean of the k3 estimator. With
    ``beta == 0`` reference logprobs are not required.
    """
    params = params or GrpoParams()
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (len(group.rollouts),):
        raise TraceError(f"got {adv.size} advantages for {len(group.rollouts)} rollouts")
    lo, hi = 1.0 - params.epsilon, 1.0 + params.epsilon
    surrogate, kl_sum = 0.0, 0.0
    n_tokens, n_clipped, ratio_sum = 0, 0, 0.0
    for i, (trace, a) in enumerate(zip(group.rollouts, adv)):
        m = trace.mask
        ratio = np.exp(trace.logp_new[m] - trace.logp_old[m])
        surrogate += float(np.minimum(ratio * a, np.clip(ratio, lo, hi) * a).sum())
        n_clipped += int(((ratio < lo) | (ratio > hi)).sum())
        ratio_sum += float(ratio.sum())
        n_tokens += ratio.size
        if params.beta:
            if trace.logp_ref is None:
                raise TraceError(f"rollout {i} has no reference logprobs but beta > 0")
            kl_sum += float(_k3(trace.logp_new[m], trace.logp_ref[m]).sum())
    if n_tokens == 0:
        return 0.0, ObjectiveDiagnostics(0.0, 0.0, 0.0, 0, ["no unmasked tokens"])
    kl = kl_sum / n_tokens
    objective = surrogate / n_tokens - params.beta * kl
    return objective, ObjectiveDiagnostics(n_clipped / n_tokens, ratio_sum / n_tokens, kl, n_tokens)


def token_spans(text: str) -> list[tuple[int, int]]:
    """Split *text* into contiguous character spans: tags, whitespace runs and words."""
    return [m.span() for m in _PIECE_RE.finditer(text)]


def information_mask(full_text: str, token_offsets: Sequence[tuple[int, int]]) -> list[bool]:
    """``False`` for tokens lying entirely inside an information element (tags included).

    *full_text* may also be a trajectory; its ``full_text`` is used.
    """
    full_text = getattr(full_text, "full_text", full_text)
    pos = 0
    for start, end in token_offsets:
        if start != pos or end < start:
            raise TraceError(f"token offsets do not cover the text contiguously at offset {pos}")
        pos = end
    if pos != len(full_text):
        raise TraceError(f"token offsets end at {pos}, text has {len(full_text)} characters")
    spans = information_spans(full_text)
    return [not any(s <= start and end <= e for s, e in spans) for start, end in token_offsets]


# Group trace files: one JSON object per line,
# {"question_id": str, "rollouts": [{"tokens", "logp_new", "logp_old", "logp_ref"?, "mask", "reward"}]}


def group_from_record(rec: dict) -> GroupTrace:
    rollouts, rewards = [], []
    for j, r in enumerate(rec["rollouts"]):
        try:
            rollouts.append(
                TokenTrace(r["tokens"], r["logp_new"], r["logp_old"], r["mask"], r.get("logp_ref"))
            )
            rewards.append(float(r["reward"]))
        except TraceError as e:
            raise TraceError(f"rollout {j}: {e}") from e
        except KeyError as e:
            raise TraceError(f"rollout {j}: missing field {e.args[0]!r}") from e
    return GroupTrace(rollouts, rewards, str(rec.get("question_id", "")))


def group_to_record(group: GroupTrace) -> dict:
    rollouts = []
    for t, reward in zip(group.rollouts, group.rewards):
        r = {
            "tokens": list(t.tokens),
            "logp_new": t.logp_new.tolist(),
            "logp_old": t.logp_old.tolist(),
            "mask": t.mask.tolist(),
            "reward": reward,
        }
        if t.logp_ref is not None:
            r["logp_ref"] = t.logp_ref.tolist()
        rollouts.append(r)
    return {"question_id": group.question_id, "rollouts": rollouts}


def load_group_traces(path: str | Path) -> list[GroupTrace]:
    groups = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                groups.append(group_from_record(json.loads(line)))
            except (TraceError, KeyError, TypeError, ValueError) as e:
                raise TraceError(f"record {len(groups)}: {e}") from e
    return groups
