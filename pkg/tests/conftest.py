"""Shared fixtures and the acceptance-criteria summary."""

import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}
_DETAILS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def detail(request):
    """Free-form numbers a criterion test wants echoed in the summary line."""
    d = {}
    _DETAILS[request.node.nodeid] = d
    return d


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    status = "PASS" if report.passed else "FAIL"
    if n in _CRITERIA and _CRITERIA[n][0] == "FAIL":
        return
    info = _DETAILS.get(item.nodeid, {})
    text = ", ".join(f"{k} {v}" for k, v in info.items())
    _CRITERIA[n] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}" + (f"  ({text})" if text else ""))
