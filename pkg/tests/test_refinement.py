from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from smrlab.app import Command, Operation, RegisterApp
from smrlab.config import ScenarioConfig
from smrlab.engines import run_scenario
from smrlab.kernel import MalformedTrace, TraceEvent
from smrlab.multiconsensus import PI
from smrlab.refinement import (
    CHAINS,
    INJECTIONS,
    EngineToMC,
    MCToActive,
    Reject,
    TraceContext,
    accepted,
    check_refinement,
    default_chain,
    derive_decisions,
    derive_service_state,
    inject_violation,
    parse_chain,
)

A = Command("client/0", Operation("a", "inc"))
B = Command("client/1", Operation("b", "inc"))
R1, R2 = (1, 0), (2, 1)


# -- derivations ---------------------------------------------------------------------
def test_derive_decisions_majority_in_one_round():
    certified = [("c0", 1, PI(R1, A)), ("c1", 1, PI(R1, A)), ("c2", 2, PI(R1, B))]
    assert derive_decisions(certified, 3) == {1: A}


def test_derive_decisions_needs_a_single_round():
    # two certificates for A, but in different rounds: no decision (bottom)
    certified = [("c0", 1, PI(R1, A)), ("c1", 1, PI(R2, A))]
    assert derive_decisions(certified, 3) == {}
    # bottom entries never count
    assert derive_decisions([("c0", 1, PI(R1, None)), ("c1", 1, PI(R1, None))], 3) == {}


def test_derive_decisions_conflict_raises():
    certified = [("c0", 1, PI(R1, A)), ("c1", 1, PI(R1, A)), ("c1", 1, PI(R2, B)), ("c2", 1, PI(R2, B))]
    with pytest.raises(ValueError):
        derive_decisions(certified, 3)


def test_derive_service_state_examples():
    assert derive_service_state({"r0": (1, 0), "r1": (1, 0)}) is None
    assert derive_service_state({"r0": (3, 8), "r1": (2, 4)}) == 8
    assert derive_service_state({"r0": (3, 8), "r1": (3, 8)}) == 8
    with pytest.raises(ValueError):
        derive_service_state({"r0": (3, 8), "r1": (3, 7)})
    with pytest.raises(ValueError):
        derive_service_state({})


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["c0", "c1", "c2"]), st.integers(1, 3), st.sampled_from([R1, R2]),
                          st.sampled_from([A, None])), max_size=14))
def test_derive_decisions_monotone(entries):
    """Adding certifications never retracts a decision (single command per slot here)."""
    certified = [(c, s, PI(r, cmd)) for c, s, r, cmd in entries]
    for k in range(len(certified)):
        before = derive_decisions(certified[:k], 3)
        after = derive_decisions(certified[: k + 1], 3)
        assert all(after.get(s) == v for s, v in before.items())


# -- pipelines -------------------------------------------------------------------------
@pytest.mark.parametrize("proto", ["paxos", "vsr", "zab"])
def test_engine_traces_refine(proto):
    result = run_scenario(ScenarioConfig(protocol=proto, seed=3, loss=0.1, crashes=[["certifier/0", 30]]))
    verdicts = check_refinement(result.trace)
    assert accepted(verdicts), [v.to_dict() for v in verdicts if not v.accepted]
    assert [v.edge for v in verdicts] == list(CHAINS["active" if proto == "paxos" else "passive"])
    assert all(v.steps > 0 for v in verdicts)


def test_mc_walk_with_po_refines():
    result = run_scenario(ScenarioConfig(protocol="mc", po=True, seed=4, steps=600))
    assert accepted(check_refinement(result.trace))


def test_mc_walk_without_po_is_rejected_at_passive_mapping():
    result = run_scenario(ScenarioConfig(protocol="mc", po=False, seed=2, steps=2000, clients=3))
    assert result.extra["order_anomalies"]
    verdicts = check_refinement(result.trace)
    assert [v.edge for v in verdicts] == list(CHAINS["mc_passive"])
    assert verdicts[0].accepted
    bad = verdicts[1]
    assert bad.edge == "mc→passive" and not bad.accepted and bad.failure.seq > 0
    assert all(v.skipped for v in verdicts[2:])
    # the prefix-ordered chain already rejects at the first edge
    po_verdicts = check_refinement(result.trace, CHAINS["passive"])
    assert po_verdicts[0].edge == "engine→mcpo" and not po_verdicts[0].accepted


def test_forged_second_decide_rejected_by_active_stage():
    ctx = TraceContext(RegisterApp(), ["c0", "c1", "c2"], ["replica/0"], ["client/0", "client/1"], False, False)
    stage = MCToActive(ctx)
    stage.feed(0, ("invoke", "client/0", {"op": ["a", "inc", None]}))
    stage.feed(1, ("invoke", "client/1", {"op": ["b", "inc", None]}))
    stage.feed(2, ("propose", "replica/0", 1, A))
    stage.feed(3, ("propose", "replica/0", 1, B))
    stage.feed(4, ("decide", 1, A))
    with pytest.raises(Reject) as err:
        stage.feed(5, ("decide", 1, B))
    assert "already decided" in err.value.reason


@pytest.fixture(scope="module")
def traces():
    paxos = run_scenario(ScenarioConfig(protocol="paxos", seed=3, crashes=[["certifier/0", 30]])).trace
    zab = run_scenario(ScenarioConfig(protocol="zab", seed=3, crashes=[["certifier/0", 30]])).trace
    return {"paxos": paxos, "zab": zab}


@pytest.mark.parametrize("kind", INJECTIONS)
def test_injected_violations_are_rejected(traces, kind):
    base = traces["zab"] if kind in ("skip_po", "skip_install") else traces["paxos"]
    assert accepted(check_refinement(base))
    tampered = inject_violation(base, kind)
    verdicts = check_refinement(tampered)
    assert not accepted(verdicts)
    failure = next(v.failure for v in verdicts if v.failure is not None)
    assert 0 < failure.seq <= tampered[-1].seq
    assert failure.reason


def test_unknown_injection():
    with pytest.raises(ValueError):
        inject_violation([], "flip_bits")


def test_stutters_leave_abstract_state_unchanged(traces):
    """Non-emitting engine steps change neither derived decisions nor learned values."""
    trace = traces["paxos"]
    ctx = TraceContext.from_events(trace)
    stage = EngineToMC(ctx, po=False)
    for ev in trace[1:]:
        if ev.transition not in ("invoke", "response", "propose", "certifySeq", "certify", "supportRound",
                                 "recover", "observeDecision", "update"):
            continue
        before = (derive_decisions(stage.mc.certified, stage.mc.n), {r: dict(v) for r, v in stage.mc.learned.items()})
        out = stage.feed(ev.seq, (ev.transition, ev.process, ev.params))
        after = (derive_decisions(stage.mc.certified, stage.mc.n), {r: dict(v) for r, v in stage.mc.learned.items()})
        if not out:
            assert before == after, ev


# -- chain parsing -------------------------------------------------------------------
def test_parse_chain_forms():
    assert parse_chain("engine->mc->active->linearizable") == CHAINS["active"]
    assert parse_chain("engine→mcpo→passive→active→linearizable") == CHAINS["passive"]
    assert parse_chain("engine->mc, mc->active") == CHAINS["active"][:2]


@pytest.mark.parametrize("text", ["engine->paxos", "mc->active->linearizable", "engine->mc, passive->active"])
def test_parse_chain_errors(text):
    with pytest.raises(ValueError):
        parse_chain(text)


def test_default_chain_by_trace_kind(traces):
    assert default_chain(TraceContext.from_events(traces["paxos"])) == CHAINS["active"]
    assert default_chain(TraceContext.from_events(traces["zab"])) == CHAINS["passive"]


def test_unknown_transition_is_malformed(traces):
    bad = list(traces["paxos"][:5]) + [TraceEvent(5, 9, "certifier/0", "teleport", {})]
    with pytest.raises(MalformedTrace) as err:
        check_refinement(bad)
    assert err.value.line == 6


def test_trace_without_config_is_malformed(traces):
    with pytest.raises(MalformedTrace):
        check_refinement(traces["paxos"][1:])


def test_random_prefixes_of_accepted_traces_are_accepted(traces):
    rng = random.Random(0)
    trace = traces["zab"]
    for _ in range(5):
        cut = rng.randrange(2, len(trace))
        assert accepted(check_refinement(trace[:cut]))
