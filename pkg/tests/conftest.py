_ACCEPTANCE_LINES: list[str] = []

import pytest


@pytest.fixture(scope="session")
def acceptance_log():
    """Shared sink for per-criterion result lines, replayed after the run."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
