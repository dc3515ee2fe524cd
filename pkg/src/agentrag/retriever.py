"""Okapi BM25 over an in-memory corpus, plus an HTTP retriever with the same contract.

Scoring uses the non-negative idf ``ln(1 + (N - df + 0.5) / (df + 0.5))``.
Results are score-descending with ties broken by document ordinal; documents
scoring exactly zero are never returned.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import requests

from .corpus import Corpus, Document

INDEX_FORMAT = "agentrag-bm25"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+")


class IndexLoadError(RuntimeError):
    pass


class IndexVersionError(IndexLoadError):
    pass


class IndexCorruptError(IndexLoadError):
    pass


class RetrieverError(RuntimeError):
    """Retrieval failed; ``query`` names the query that triggered it."""

    def __init__(self, message: str, query: str | None = None):
        super().__init__(message if query is None else f"{message} (query: {query!r})")
        self.query = query


def tokenize(text: str) -> list[str]:
    """Lowercased runs of Unicode letters/digits; everything else separates tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not (self.k1 >= 0):
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not (0 <= self.b <= 1):
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class RankedHit:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class Passage:
    """A retrieved passage as carried through rollouts and shown to readers."""

    doc_id: str
    title: str
    text: str
    score: float | None = None

    @classmethod
    def from_document(cls, doc: Document, score: float | None = None) -> "Passage":
        return cls(doc.id, doc.title, doc.text, score)

    @property
    def contents(self) -> str:
        return f'"{self.title}"\n{self.text}'

    def to_record(self) -> dict:
        rec = {"id": self.doc_id, "title": self.title, "text": self.text}
        if self.score is not None:
            rec["score"] = self.score
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Passage":
        return cls(str(rec["id"]), str(rec.get("title", "")), str(rec["text"]), rec.get("score"))


@dataclass
class Bm25Index:
    doc_ids: list[str]
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    params: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self):
        self._tf_maps: list[dict[str, int]] | None = None

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def _term_frequency(self, term: str, ordinal: int) -> int:
        if self._tf_maps is None:
            maps: list[dict[str, int]] = [{} for _ in range(self.doc_count)]
            for t, plist in self.postings.items():
                for o, tf in plist:
                    maps[o][t] = tf
            self._tf_maps = maps
        return self._tf_maps[ordinal].get(term, 0)

    def _length_norm(self, ordinal: int) -> float:
        p = self.params
        return p.k1 * (1.0 - p.b + p.b * self.doc_lengths[ordinal] / self.avg_doc_length)

    def score(self, query_tokens: list[str], doc_ordinal: int) -> float:
        if not 0 <= doc_ordinal < self.doc_count:
            raise IndexError(f"document ordinal {doc_ordinal} out of range [0, {self.doc_count})")
        k1 = self.params.k1
        norm = self._length_norm(doc_ordinal)
        total = 0.0
        for term in query_tokens:
            tf = self._term_frequency(term, doc_ordinal)
            if tf:
                total += self.idf(term) * tf * (k1 + 1.0) / (tf + norm)
        return total

    def retrieve(self, query: str, k: int) -> list[RankedHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        k1 = self.params.k1
        scores: dict[int, float] = {}
        # Accumulate in query-token order so sums match per-document scoring exactly.
        for term in tokenize(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for ordinal, tf in plist:
                contrib = idf * tf * (k1 + 1.0) / (tf + self._length_norm(ordinal))
                scores[ordinal] = scores.get(ordinal, 0.0) + contrib
        ranked = sorted(((s, o) for o, s in scores.items() if s > 0.0), key=lambda x: (-x[0], x[1]))
        return [RankedHit(self.doc_ids[o], s, rank) for rank, (s, o) in enumerate(ranked[:k], start=1)]

    def to_payload(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "params": {"k1": self.params.k1, "b": self.params.b},
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in self.postings[t]] for t in sorted(self.postings)},
        }


def build_index(corpus: Corpus, params: Bm25Params | None = None) -> Bm25Index:
    if corpus.count == 0:
        raise ValueError("cannot index empty corpus")
    params = params or Bm25Params()
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for ordinal, doc in enumerate(corpus):
        # Titles are not indexed; only passage text is scored.
        toks = tokenize(doc.text)
        lengths.append(len(toks))
        for term, tf in Counter(toks).items():
            postings.setdefault(term, []).append((ordinal, tf))
    if sum(lengths) == 0:
        raise ValueError("cannot index corpus without any tokens")
    return Bm25Index([d.id for d in corpus], postings, lengths, params)


def save_index(index: Bm25Index, path: str | Path) -> None:
    data = json.dumps(index.to_payload(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    Path(path).write_text(data + "\n", encoding="utf-8")


def load_index(path: str | Path) -> Bm25Index:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as e:
        raise IndexCorruptError(f"index file {path} is corrupt or truncated: {e.msg}") from e
    if not isinstance(payload, dict) or payload.get("format") != INDEX_FORMAT:
        raise IndexCorruptError(f"index file {path} is not a {INDEX_FORMAT} container")
    if payload.get("version") != INDEX_VERSION:
        raise IndexVersionError(
            f"index file {path} has version {payload.get('version')!r}, expected {INDEX_VERSION}"
        )
    try:
        params = Bm25Params(**payload["params"])
        doc_ids = [str(x) for x in payload["doc_ids"]]
        lengths = [int(x) for x in payload["doc_lengths"]]
        postings = {t: [(int(o), int(tf)) for o, tf in plist] for t, plist in payload["postings"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise IndexCorruptError(f"index file {path} is corrupt: {e}") from e
    n = len(lengths)
    if n == 0 or len(doc_ids) != n:
        raise IndexCorruptError(f"index file {path} is corrupt: document tables disagree")
    for t, plist in postings.items():
        ords = [o for o, _ in plist]
        if any(not 0 <= o < n for o in ords) or ords != sorted(ords):
            raise IndexCorruptError(f"index file {path} is corrupt: bad postings for term {t!r}")
    return Bm25Index(doc_ids, postings, lengths, params)


class Retriever(Protocol):
    def search(self, query: str, k: int) -> list[Passage]: ...


class Bm25Retriever:
    """Embedded retriever: BM25 index plus the corpus that supplies passage text."""

    def __init__(self, index: Bm25Index, corpus: Corpus):
        if index.doc_ids != [d.id for d in corpus]:
            raise ValueError("index was not built from this corpus")
        self.index = index
        self.corpus = corpus

    @classmethod
    def from_corpus(cls, corpus: Corpus, params: Bm25Params | None = None) -> "Bm25Retriever":
        return cls(build_index(corpus, params), corpus)

    def search(self, query: str, k: int) -> list[Passage]:
        hits = self.index.retrieve(query, k)
        return [Passage.from_document(self.corpus.get(h.doc_id), h.score) for h in hits]


class RemoteRetriever:
    """Retriever over HTTP.

    Request body ``{"query": str, "topk": int}``; response
    ``{"hits": [{"id", "title", "text", "score"}, ...]}``.
    """

    def __init__(self, url: str, timeout: float = 30.0, session: requests.Session | None = None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()

    def search(self, query: str, k: int) -> list[Passage]:
        try:
            resp = self.session.post(self.url, json={"query": query, "topk": k}, timeout=self.timeout)
        except requests.RequestException as e:
            raise RetrieverError(f"remote retriever unreachable: {e}", query) from e
        if resp.status_code // 100 != 2:
            raise RetrieverError(f"remote retriever returned {resp.status_code}: {resp.text[:200]}", query)
        try:
            hits = resp.json()["hits"]
            return [Passage.from_record(h) for h in hits][:k]
        except (ValueError, KeyError, TypeError) as e:
            raise RetrieverError(f"malformed remote retriever response: {e}", query) from e
