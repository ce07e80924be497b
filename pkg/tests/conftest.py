"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

from collections import defaultdict

import pytest

_outcomes: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _outcomes[marker.args[0]].append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        ok = all(passed for _, passed, _ in results)
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in results)
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {details}")
