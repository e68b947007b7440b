"""Shared pytest plumbing: the acceptance-criterion result banner.

Acceptance tests record one line per criterion through the
``criterion`` fixture; the lines are printed together in a terminal
section after the run so the pass/fail state of every criterion is
visible in one place even when unrelated tests fail.
"""

from __future__ import annotations

import pytest

_criterion_lines: list[str] = []


@pytest.fixture
def criterion():
    """Return a recorder: criterion(number, name, passed, detail='')."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        suffix = f" -- {detail}" if detail else ""
        _criterion_lines.append(f"criterion {number:2d} [{status}] {name}{suffix}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_criterion_lines):
        terminalreporter.write_line(line)
