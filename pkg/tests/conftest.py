import os
import sys
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")

_CRITERIA = defaultdict(list)  # number -> [(nodeid, outcome, details)]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    details = [v for k, v in report.user_properties if k == "detail"]
    _CRITERIA[n].append((report.nodeid.split("::")[-1], report.outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rows = _CRITERIA[n]
        ok = all(o == "passed" for _, o, _ in rows)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}")
        for name, outcome, details in rows:
            tr.write_line(f"    {outcome:7s} {name}" + (f"  [{'; '.join(details)}]" if details else ""))


@pytest.fixture
def criterion(request):
    """Tag the test with its criterion number; returns a callable that attaches measured values."""
    marker = request.node.get_closest_marker("criterion")
    request.node.user_properties.append(("criterion", marker.args[0]))

    def note(text):
        request.node.user_properties.append(("detail", text))
        print(text)

    return note


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
