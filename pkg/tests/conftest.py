from pathlib import Path

import numpy as np
import pytest

from keellab.trainer import load_corpus, split_corpus

DATA = Path(__file__).parent / "data"
CORPUS = DATA / "corpus.txt"


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(CORPUS)


@pytest.fixture(scope="session")
def corpus_split(corpus):
    return split_corpus(corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
