"""Per-criterion PASS/FAIL summary for the acceptance suite.

Acceptance tests carry ``@pytest.mark.criterion(k, title)`` and may attach a
measured detail via ``request.node.user_properties``. A criterion passes only
if every test tagged with it passed.
"""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "details": []})
        entry["ok"] = entry["ok"] and report.outcome == "passed"
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
        if report.outcome != "passed":
            entry["details"].append(f"{item.name}: {report.outcome}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
