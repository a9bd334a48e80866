import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record a one-line PASS/FAIL verdict shown in the terminal summary."""

    def _report(name: str, ok: bool, detail: str = "") -> bool:
        _REPORT.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else ""))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
