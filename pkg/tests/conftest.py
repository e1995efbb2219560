"""Per-criterion pass/fail report for tests marked ``acceptance``."""

from collections import defaultdict

_results: dict[int, list] = defaultdict(list)
_titles: dict[int, str] = {}
_criterion_of: dict[str, int] = {}
_measured: dict[int, list] = defaultdict(list)


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None and "criterion" in marker.kwargs:
            _titles[marker.kwargs["criterion"]] = marker.kwargs.get("title", "")
            _criterion_of[item.nodeid] = marker.kwargs["criterion"]


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if report.nodeid in _criterion_of:
        number = _criterion_of[report.nodeid]
        _results[number].append(report.outcome)
        _measured[number] += [value for key, value in report.user_properties if key == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_titles):
        outcomes = _results.get(number)
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {_titles[number]}")
        for value in _measured.get(number, []):
            terminalreporter.write_line(f"    {value}")
