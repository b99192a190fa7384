"""Shared fixtures: acceptance-line recording that survives pytest's
output capture, so the per-criterion pass/fail lines appear in the
terminal summary of every run."""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance-criterion outcome and assert it.

    Usage: criterion(number, ok, detail). The line is printed immediately
    (visible with -s or on failure) and replayed in the terminal summary.
    """

    def record(num: int, ok: bool, detail: str):
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
