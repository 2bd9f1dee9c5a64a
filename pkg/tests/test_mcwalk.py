from __future__ import annotations

from smrlab.config import ScenarioConfig
from smrlab.engines import run_scenario
from smrlab.refinement import accepted, check_refinement


def walk(po, seed, **kw):
    return run_scenario(ScenarioConfig(protocol="mc", po=po, seed=seed, **kw))


def test_po_walks_are_safe_ordered_and_refine():
    for seed in range(8):
        result = walk(True, seed, steps=800)
        assert result.safe, result.violations
        assert result.extra["in_order"] and not result.extra["order_anomalies"]
        assert accepted(check_refinement(result.trace))


def test_po_off_produces_order_anomalies_for_some_seed():
    hits = [s for s in range(20) if walk(False, s, steps=2000, clients=3).extra["order_anomalies"]]
    assert hits


def test_po_off_still_agrees_per_slot():
    for seed in range(8):
        result = walk(False, seed, steps=1000)
        assert not [v for v in result.violations if "decided" in v or "certified" in v]


def test_walk_is_deterministic():
    a, b = walk(False, 5, steps=500), walk(False, 5, steps=500)
    assert a.lines() == b.lines()
    assert a.extra == b.extra


def test_walk_records_config_like_engines():
    result = walk(True, 1, steps=50)
    head = result.trace[0]
    assert head.transition == "config" and head.params["passive"] and head.params["po"]
    assert head.params["certifiers"] == ["certifier/0", "certifier/1", "certifier/2"]
