import numpy as np
import pytest

_DETAILS: dict[str, str] = {}
_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Attach a short measurement summary to the current acceptance line."""
    def put(text: str) -> None:
        _DETAILS[request.node.nodeid] = text
    return put


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    if rep.failed and rep.when != "call":
        status = f"FAIL ({rep.when} error)"
    info = _DETAILS.get(item.nodeid, "")
    _LINES[number] = f"criterion {number:2d} {status}: {title}" + (f" | {info}" if info else "")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
