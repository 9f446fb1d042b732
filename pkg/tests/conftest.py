import os
import re
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n, name = int(m.group(1)), m.group(2)
    if report.failed:
        _results[n] = (name, "FAIL")
    elif report.when == "call" and n not in _results:
        _results[n] = (name, "PASS" if report.passed else "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, verdict = _results[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  ({name.replace('_', ' ')})")
