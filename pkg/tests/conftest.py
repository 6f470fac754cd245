import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    from cocnn.train import set_threads

    limiter = set_threads(1)
    yield
    limiter.restore_original_limits()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        entry = _CRITERIA.setdefault(name, {"outcomes": [], "details": []})
        entry["outcomes"].append(status)
        entry["details"].extend(f"{item.name}: {v}" for k, v in item.user_properties if k == "measured")
        if status == "SKIP":
            entry["details"].append(f"{item.name}: skipped, {rep.longrepr[-1] if rep.longrepr else ''}")

def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, entry in _CRITERIA.items():
        outs = entry["outcomes"]
        status = "FAIL" if "FAIL" in outs else "PASS" if "PASS" in outs else "SKIP"
        tr.write_line(f"{status}  {name}")
        for d in entry["details"]:
            tr.write_line(f"        {d}")
