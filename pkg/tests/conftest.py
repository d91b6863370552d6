"""Collects acceptance-criterion outcomes and prints one line per criterion."""
from collections import defaultdict

import pytest

TIME_LIMIT = 60.0
_results = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _results[marker.args[0]].append((rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        parts = _results[n]
        seconds = sum(d for _, d in parts)
        ok = all(p for p, _ in parts) and seconds < TIME_LIMIT
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} "
                                    f"({len(parts)} test(s), {seconds:.1f} s)")
