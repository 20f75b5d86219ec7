import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_acceptance_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_acceptance_key] = []


@pytest.fixture
def acceptance(request):
    """Records one (criterion, passed, detail) line for the terminal summary."""
    lines = request.config.stash[_acceptance_key]

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        lines.append((number, f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})"))
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_acceptance_key]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
