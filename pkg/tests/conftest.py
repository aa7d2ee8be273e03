"""Shared fixtures plus the acceptance-criterion summary printed after the run."""

from __future__ import annotations

import pytest

from psydiag.knowledge import kg_from_machines
from psydiag.statemachine import load_shipped_machines

_results: dict[int, dict] = {}


@pytest.fixture(scope="session")
def defs():
    return load_shipped_machines()


@pytest.fixture(scope="session")
def kg(defs):
    return kg_from_machines(defs)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "passed": True, "seen": False})
    if report.when == "call":
        entry["seen"] = True
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        ok = entry["passed"] and entry["seen"]
        terminalreporter.write_line(f"ACCEPTANCE [{'PASS' if ok else 'FAIL'}] {number:>2} {entry['title']}")
