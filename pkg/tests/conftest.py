import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shardplan.profile_io import load_profile  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def f1():
    return load_profile(FIXTURES / "f1.profile.json")


@pytest.fixture
def f1_expected():
    return json.loads((FIXTURES / "f1.expected.json").read_text())


@pytest.fixture
def report():
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
