import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(number, title): test belongs to an acceptance criterion")
    config.stash[_OUTCOMES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown" and report.passed:
        return
    number, title = marker.args
    entry = item.config.stash[_OUTCOMES].setdefault(number, [title, True, []])
    if report.failed or report.skipped:
        entry[1] = False
        entry[2].append(item.name)


def pytest_terminal_summary(terminalreporter, config):
    outcomes = config.stash[_OUTCOMES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        title, ok, failed = outcomes[number]
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {title}"
        if failed:
            line += f" (failing: {', '.join(failed)})"
        terminalreporter.write_line(line)
