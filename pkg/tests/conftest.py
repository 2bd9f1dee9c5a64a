from __future__ import annotations

import sys

import pytest

from smrlab.config import ScenarioConfig
from smrlab.engines import run_scenario


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])


@pytest.fixture
def run():
    """Run a scenario from keyword overrides."""

    def _run(protocol="paxos", **kw):
        return run_scenario(ScenarioConfig(protocol=protocol, **kw))

    return _run
