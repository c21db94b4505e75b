"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""
import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        detail = dict(report.user_properties).get("measured", "")
        _RESULTS[key] = ("FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (status, detail) in sorted(_RESULTS.items()):
        line = f"criterion {num:2d} {name.replace('_', ' ')}: {status}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
