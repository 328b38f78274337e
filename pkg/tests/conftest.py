"""Collects the outcome of every ``@pytest.mark.criterion`` test and prints
one pass/fail line per acceptance criterion at the end of the session."""

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    if rep.when != "call" and rep.passed:
        return
    number, title = mark.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    if rep.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        line = f"criterion {number:2d} {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["details"]:
            line += "  [" + "; ".join(r["details"]) + "]"
        terminalreporter.write_line(line)
