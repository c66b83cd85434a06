import numpy as np
import pytest

from dptopk.scores import ScoreVector

_acceptance = []


@pytest.fixture
def rng():
    return np.random.default_rng(20241019)


def random_scores(rng, d, spread=3.0):
    return ScoreVector.from_raw(rng.normal(scale=spread, size=d))


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{flag}  {name}")
