import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(number, title, ok, detail)`` records one acceptance line."""

    def record(number, title, ok, detail=""):
        _CRITERIA[number] = (title, bool(ok), detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}  {detail}")
