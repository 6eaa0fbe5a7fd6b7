"""Collects the acceptance PASS/FAIL lines and repeats them in the terminal summary."""

import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one acceptance line; returns the pass flag for asserting."""

    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
