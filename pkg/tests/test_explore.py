from __future__ import annotations

import pytest

from smrlab.explore import ExploreBounds, explore


def test_zero_commands_is_one_state_family_and_safe():
    report = explore(ExploreBounds(n=3, commands=0, rounds=1, slots=1))
    assert report.complete and report.safe
    assert report.states > 1  # support/recover moves still exist


def test_zero_rounds_is_a_single_state():
    report = explore(ExploreBounds(n=3, commands=2, rounds=0, slots=1))
    assert (report.states, report.edges, report.complete) == (1, 0, True)


def test_state_cap_marks_incomplete():
    report = explore(ExploreBounds(n=3, commands=2, rounds=2, slots=1, max_states=50))
    assert not report.complete
    assert report.states == 50


def test_goal_path_replays_to_goal():
    common = dict(n=3, rounds=2, slots=2, replicas=0, payload="register_passive", coords="rota", goal="4_then_7")
    report = explore(ExploreBounds(po=False, stop_at_goal=True, **common))
    assert report.goal_reached and not report.complete
    from smrlab.explore import GOALS, initial_machine

    mc = initial_machine(report.bounds)
    for move in report.goal_path:
        assert getattr(mc, move[0])(*move[1:]), move
    assert GOALS["4_then_7"](mc)
    # the same interleaving breaks prefix order
    assert "prefix_order" in report.violations


def test_single_round_po_never_reaches_goal():
    report = explore(ExploreBounds(n=3, rounds=1, slots=2, payload="register_passive", po=True,
                                   coords="rota", goal="4_then_7"))
    assert report.complete and report.safe and not report.goal_reached


@pytest.mark.parametrize("bad", [dict(n=0), dict(rounds=-1), dict(payload="blob"), dict(coords="some"),
                                 dict(goal="5_then_9")])
def test_invalid_bounds(bad):
    with pytest.raises(ValueError):
        ExploreBounds(**bad)


def test_summary_is_json_ready():
    import json

    report = explore(ExploreBounds(n=3, commands=1, rounds=1, slots=1))
    data = json.loads(json.dumps(report.summary()))
    assert data["complete"] and data["safe"] and data["states"] == report.states
