"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_outcomes: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _outcomes.setdefault(n, {"title": title, "status": "PASS", "seconds": 0.0})
    if report.when == "call":
        entry["seconds"] += report.duration
    if report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    elif report.failed:
        entry["status"] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        terminalreporter.write_line(f"criterion {n}: {e['status']:<4}  {e['title']}  ({e['seconds']:.1f} s)")
