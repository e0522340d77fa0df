import os
from collections import OrderedDict

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")
    config._criteria = OrderedDict()


def pytest_collection_modifyitems(config, items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            config._criteria.setdefault(n, {"title": title, "tests": {}})
            config._criteria[n]["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    config = _config_ref.get("config")
    if config is None:
        return
    for entry in config._criteria.values():
        if report.nodeid in entry["tests"]:
            if report.when == "call" or report.outcome != "passed":
                prev = entry["tests"][report.nodeid]
                if prev in (None, "passed"):
                    entry["tests"][report.nodeid] = report.outcome


_config_ref = {}


@pytest.hookimpl(tryfirst=True)
def pytest_sessionstart(session):
    _config_ref["config"] = session.config


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", None)
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        entry = crit[n]
        outcomes = list(entry["tests"].values())
        if any(o is None for o in outcomes):
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {entry['title']}")
