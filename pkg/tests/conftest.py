import sys

import pytest

from lotrsim import lotr


@pytest.fixture
def canonical():
    return lotr.canonical_setup()


@pytest.fixture
def state(canonical):
    return canonical[0]


@pytest.fixture
def handle(canonical):
    return canonical[1]


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
