import time

import pytest

# criterion number -> (title, passed, seconds, detail)
ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Records one acceptance criterion; the summary line is printed at session end."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    record = {"detail": "", "start": time.perf_counter(), "extra_seconds": 0.0}
    yield record
    seconds = time.perf_counter() - record["start"] + record["extra_seconds"]
    passed = ACCEPTANCE.get(number, [None, None])[1]
    ACCEPTANCE[number] = [title, passed, seconds, record["detail"]]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    entry = ACCEPTANCE.setdefault(number, [title, None, report.duration, ""])
    entry[1] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, seconds, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {title} ({seconds:.1f} s) {detail}")
