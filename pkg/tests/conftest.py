"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""
import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "passed": True, "ran": False, "details": []})
    if report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        entry["passed"] = entry["passed"] and report.passed
        entry["details"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["details"]]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        detail = f" ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number:>2} [{status}] {e['title']}{detail}")
