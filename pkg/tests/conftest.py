import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from redispatch_shapley.case_io import load_builtin, parse_matpower_case  # noqa: E402

TWO_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0   0  0 0 1 1 0 230 1 1.1 0.9;
    2 1 100 20 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
    1 0 0 300 -300 1.0 100 1 300 0;
];
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0 20 0;
];
"""


@pytest.fixture(scope="session")
def two_bus():
    return parse_matpower_case(TWO_BUS, name="two_bus")


@pytest.fixture(scope="session")
def case9():
    return load_builtin("case9")


@pytest.fixture(scope="session")
def case39():
    return load_builtin("case39")


@pytest.fixture(scope="session")
def case118():
    return load_builtin("case118")


_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            outcome = "PASS"
        elif hasattr(report, "wasxfail"):
            outcome = "FAIL (non-gating)"
        else:
            outcome = "FAIL"
        _CRITERIA[marker] = outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = (str(mark.args[0]), mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    def rank(key):
        digits = "".join(c for c in key[0] if c.isdigit())
        return (int(digits) if digits else 10**6, key[0])

    order = sorted(_CRITERIA, key=rank)
    for label, text in order:
        terminalreporter.write_line(f"criterion {label:<4} {_CRITERIA[(label, text)]:<17} {text}")
