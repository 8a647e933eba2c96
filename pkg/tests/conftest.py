import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import Corpus, build_corpus  # noqa: E402

# filled in by the release gates in test_acceptance.py, echoed after the run
ACCEPT_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPT_LINES:
        terminalreporter.write_sep("-", "acceptance gates")
        for line in ACCEPT_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Corpus:
    """The synthetic hermetic corpus, built once per test session."""
    return build_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture()
def loveda_pool(corpus):
    return corpus.pool
