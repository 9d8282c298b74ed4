"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_CRITERIA: dict[int, dict] = {}
_ITEM_CRITERION: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): test belongs to an acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is None:
            continue
        number, title = marker.args
        entry = _CRITERIA.setdefault(number, {"title": title, "tests": 0, "passed": 0, "failed": []})
        entry["tests"] += 1
        _ITEM_CRITERION[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _ITEM_CRITERION.get(report.nodeid)
    if number is None:
        return
    entry = _CRITERIA[number]
    if report.failed or (report.skipped and report.when != "teardown"):
        entry["failed"].append(report.nodeid.split("::")[-1])
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = not entry["failed"] and entry["passed"] == entry["tests"]
        status = "PASS" if ok else "FAIL"
        detail = f"{entry['passed']}/{entry['tests']} checks"
        if entry["failed"]:
            detail += "; failed: " + ", ".join(sorted(set(entry["failed"])))
        terminalreporter.write_line(f"[{status}] criterion {number}: {entry['title']} ({detail})")
