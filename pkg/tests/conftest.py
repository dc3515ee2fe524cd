import sys
from pathlib import Path

import pytest

from agentrag.corpus import load_corpus
from agentrag.retriever import Bm25Retriever

FIXTURES = Path(__file__).parent / "fixtures"

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def fruit_corpus():
    return load_corpus(FIXTURES / "fruit_corpus.jsonl")


@pytest.fixture
def fruit_retriever(fruit_corpus):
    return Bm25Retriever.from_corpus(fruit_corpus)


@pytest.fixture
def toy_corpus():
    return load_corpus(FIXTURES / "toy_corpus.jsonl")


@pytest.fixture
def toy_retriever(toy_corpus):
    return Bm25Retriever.from_corpus(toy_corpus)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
