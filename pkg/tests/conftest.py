from __future__ import annotations

import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """record(k, ok, detail) prints one PASS/FAIL line and fails the test when not ok."""
    def record(k: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
        _LINES.append((k, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
