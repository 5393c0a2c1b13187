import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(name: str, passed: bool, detail: str = "") -> None:
        _CRITERIA.append((name, bool(passed), detail))
        print(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
