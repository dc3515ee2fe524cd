"""Document collection backing retrieval.

Corpus files are UTF-8 JSON lines, one ``{"id", "title", "text"}`` record per line.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

FIELDS = ("id", "title", "text")


class CorpusError(ValueError):
    """Malformed corpus line or violated corpus invariant."""


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise CorpusError("document id must be a non-empty string")
        if not isinstance(self.text, str) or not self.text.strip():
            raise CorpusError(f"document {self.id} has empty text")
        if not isinstance(self.title, str):
            raise CorpusError(f"document {self.id} title must be a string")

    @property
    def contents(self) -> str:
        """Title and text as shown to a reader model."""
        return f'"{self.title}"\n{self.text}'

    def to_record(self) -> dict:
        return {"id": self.id, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...] = ()
    _by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        by_id = {}
        for doc in self.documents:
            if doc.id in by_id:
                raise CorpusError(f"duplicate id {doc.id}")
            by_id[doc.id] = doc
        object.__setattr__(self, "_by_id", by_id)

    @classmethod
    def from_documents(cls, docs: Iterable[Document]) -> "Corpus":
        return cls(tuple(docs))

    @property
    def count(self) -> int:
        return len(self.documents)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __getitem__(self, ordinal: int) -> Document:
        return self.documents[ordinal]

    def get(self, doc_id: str) -> Document | None:
        return self._by_id.get(doc_id)


def get_document(corpus: Corpus, doc_id: str) -> Document | None:
    """Look up a document by id; ``None`` when absent."""
    return corpus.get(doc_id)


def _parse_line(line: str, lineno: int) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusError(f"line {lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(record, dict):
        raise CorpusError(f"line {lineno}: expected an object")
    for name in FIELDS:
        if not isinstance(record.get(name), str):
            raise CorpusError(f"line {lineno}: missing or non-string field '{name}'")
    extra = sorted(set(record) - set(FIELDS))
    if extra:
        logger.warning("line %d: ignoring extra fields %s", lineno, ", ".join(extra))
    try:
        return Document(record["id"], record["title"], record["text"])
    except CorpusError as e:
        raise CorpusError(f"line {lineno}: {e}") from e


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSON-lines corpus file. Blank lines are skipped.

    Raises ``FileNotFoundError`` for a missing file and ``CorpusError`` for a
    malformed line (message names the 1-based line number) or a duplicate id.
    """
    docs = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            doc = _parse_line(line, lineno)
            if doc.id in seen:
                raise CorpusError(f"duplicate id {doc.id}")
            seen.add(doc.id)
            docs.append(doc)
    return Corpus(tuple(docs))


def write_corpus(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(doc.to_record(), ensure_ascii=False) + "\n")
