import os
import re
import sys
from collections import defaultdict

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_CRITERIA = {
    1: "wire conformance",
    2: "protocol walk",
    3: "clock-skew invariant",
    4: "Welford equivalence",
    5: "reflector semantics",
    6: "control-plane state machine",
    7: "template equivalence",
    8: "PDR search correctness",
    9: "collector >= reflector throughput",
}
_outcomes = defaultdict(list)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[int(m.group(1))].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in _CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")


@pytest.fixture
def tmp_json(tmp_path):
    import json

    def write(obj, name="x.json"):
        p = tmp_path / name
        p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
        return p
    return write
