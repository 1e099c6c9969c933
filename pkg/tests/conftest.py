import sys
from pathlib import Path

import pytest

from isostory.planner import parse_script

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    return parse_script((FIXTURES / name).read_text())


@pytest.fixture
def story_plan():
    return load_fixture("story.txt")


@pytest.fixture
def recurring_plan():
    return load_fixture("recurring.txt")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
