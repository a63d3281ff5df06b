"""Collects one result line per acceptance criterion and prints them at the end."""
import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    def _report(label: str, ok: bool, detail: str = ""):
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
