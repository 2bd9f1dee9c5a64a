from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from smrlab.app import Command, Operation
from smrlab.explore import ExploreBounds, enabled_moves, initial_machine, register_updates
from smrlab.multiconsensus import (
    PI,
    ROUND0,
    InvariantViolation,
    MultiConsensus,
    Progress,
    pi_compare,
    pi_max,
    succ,
)

C = [f"certifier/{i}" for i in range(3)]
A = Command("client/0", Operation("a", "inc"))
B = Command("client/1", Operation("b", "double"))
R1, R2 = (1, 0), (2, 0)


def test_pi_order_examples():
    assert succ(PI(R1, A), PI(R1, None))
    assert succ(PI(R2, None), PI(R1, A))
    assert not succ(PI(R1, A), PI(R1, A))
    assert pi_compare(PI(R1, A), PI(R1, A)) == 0
    assert pi_compare(PI(R1, None), PI(R2, None)) == -1
    with pytest.raises(InvariantViolation):
        pi_compare(PI(R1, A), PI(R1, B))
    assert pi_max([PI(R1, A), PI(R2, None), PI(ROUND0, B)]) == PI(R2, None)


def test_progress_lowest_empty_and_stamp():
    p = Progress(R1, {1: PI(R1, A), 2: PI(R1, B)})
    assert p.lowest_empty(R1) == 3
    assert p.lowest_empty(R2) is None
    assert p.get(7) == PI(R1, None)
    assert p.stamp() == (R1, 2)
    assert Progress.thaw(p.freeze()) == p


def lead(mc: MultiConsensus, rnd=R1, coord=C[0], sources=C):
    """Every certifier supports ``rnd`` naming ``coord``, which then recovers."""
    for c in C:
        assert mc.support_round(c, rnd, coord)
    assert mc.recover(coord, rnd, sources)


def test_certify_seq_fills_lowest_empty_slot():
    mc = MultiConsensus(C)
    mc.propose("replica/0", 1, A)
    mc.propose("replica/0", 2, B)
    assert not mc.certify_seq(C[0], 1, PI(R1, A))  # not yet sequencer
    lead(mc)
    gap = mc.certify_seq(C[0], 2, PI(R1, B))
    assert not gap and "lowest empty" in gap.reason
    assert not mc.certify_seq(C[0], 1, PI(R1, B))  # B not proposed for slot 1
    assert mc.certify_seq(C[0], 1, PI(R1, A))
    assert mc.certify_seq(C[0], 2, PI(R1, B))
    assert not mc.certify_seq(C[1], 1, PI(R1, A))


def test_follower_copies_and_majority_decides():
    mc = MultiConsensus(C)
    mc.propose("replica/0", 1, A)
    lead(mc)
    assert not mc.certify(C[1], 1, PI(R1, A))  # nobody holds it yet
    mc.certify_seq(C[0], 1, PI(R1, A))
    assert not mc.observe_decision("replica/0", 1, A)
    assert mc.certify(C[1], 1, PI(R1, A))
    assert mc.decided == {1: A}
    assert mc.last_decided == [(1, A)]
    assert not mc.certify(C[1], 1, PI(R1, A))  # not strictly above
    assert mc.observe_decision("replica/0", 1, A)
    assert not mc.observe_decision("replica/0", 1, A)


def test_certify_in_other_round_blocked():
    mc = MultiConsensus(C)
    mc.propose("replica/0", 1, A)
    lead(mc)
    mc.certify_seq(C[0], 1, PI(R1, A))
    mc.support_round(C[2], R2, C[1])
    blocked = mc.certify(C[2], 1, PI(R1, A))
    assert not blocked and "supports" in blocked.reason


def test_support_is_strictly_increasing():
    mc = MultiConsensus(C)
    assert mc.support_round(C[0], R1, C[0])
    assert not mc.support_round(C[0], R1, C[0])
    assert not mc.support_round(C[0], ROUND0, C[0])
    assert mc.snapshots[(C[0], R1)][0] == C[0]


def test_wedge_after_higher_support():
    """Once a certifier supports a higher round it can no longer contribute
    to a lower one, so a minority-held lower round cannot complete."""
    mc = MultiConsensus(C)
    mc.propose("replica/0", 1, A)
    lead(mc)
    mc.certify_seq(C[0], 1, PI(R1, A))
    for c in C[1:]:
        mc.support_round(c, R2, C[1])
    for c in C:
        assert not mc.certify(c, 1, PI(R1, A))
    assert mc.decided == {}


def test_decision_needs_majority_within_one_round():
    """n=5: two certificates in round 1 plus two in round 2 decide nothing."""
    names = [f"certifier/{i}" for i in range(5)]
    mc = MultiConsensus(names)
    mc.propose("replica/0", 1, A)
    for c in names:
        mc.support_round(c, R1, names[0])
    mc.recover(names[0], R1, names[:3])
    mc.certify_seq(names[0], 1, PI(R1, A))
    mc.certify(names[1], 1, PI(R1, A))
    assert mc.decided == {}
    for c in names[1:]:
        mc.support_round(c, R2, names[1])
    mc.recover(names[1], R2, names[1:4])
    mc.certify(names[2], 1, PI(R2, A))
    assert mc.tally[(1, PI(R1, A))] == set(names[:2])
    assert mc.tally[(1, PI(R2, A))] == set(names[1:3])
    assert mc.decided == {}
    assert not mc.observe_decision("replica/0", 1, A)


def test_recover_takes_highest_indicator_and_restamps():
    mc = MultiConsensus(C)
    mc.propose("replica/0", 1, A)
    lead(mc)
    mc.certify_seq(C[0], 1, PI(R1, A))
    for c in C:
        mc.support_round(c, R2, C[1])
    assert not mc.recover(C[1], R2, C[1:2])  # one snapshot is not a majority
    assert not mc.recover(C[2], R2, C)  # snapshots name certifier/1
    assert mc.recover(C[1], R2, [C[0], C[1]])
    st_ = mc.certs[C[1]]
    assert st_.is_seq and st_.progress.get(1) == PI(R2, A)
    assert (C[1], 1, PI(R2, A)) in mc.certified
    assert not mc.recover(C[1], R2, C)
    # a recovery that misses the certificate starts empty
    mc2 = MultiConsensus(C)
    mc2.propose("replica/0", 1, A)
    lead(mc2)
    mc2.certify_seq(C[0], 1, PI(R1, A))
    for c in C:
        mc2.support_round(c, R2, C[1])
    assert mc2.recover(C[1], R2, [C[1], C[2]])
    assert mc2.certs[C[1]].progress.entries == {}


def test_appoint_lets_a_delegate_recover():
    mc = MultiConsensus(C)
    for c in C:
        mc.support_round(c, R1, C[0])
    assert not mc.appoint(C[1], R1, C[2])
    assert mc.appoint(C[0], R1, C[2])
    assert not mc.appoint(C[0], R1, C[1])
    for c in C:
        mc.certs[c].cert_bev = R1
    assert mc.recover(C[2], R1, C)


def _po_machine():
    app, chains = register_updates()
    mc = MultiConsensus(C, po=True, app=app)
    for r, chain in chains.items():
        for slot, u in enumerate(chain, 1):
            mc.propose(r, slot, u)
    return mc, chains


def test_po_blocks_foreign_branch_and_requires_install():
    mc, chains = _po_machine()
    (a1, a2), (_b1, b2) = chains["replica/0"], chains["replica/1"]
    lead(mc)
    assert mc.certify_seq(C[0], 1, PI(R1, a1))
    blocked = mc.certify_seq(C[0], 2, PI(R1, b2))
    assert not blocked and blocked.reason.startswith("PO:")
    assert mc.certify_seq(C[0], 2, PI(R1, a2))
    # certifier/1 has not installed round 1
    blocked = mc.certify(C[1], 1, PI(R1, a1))
    assert not blocked and "installed" in blocked.reason
    assert mc.install(C[1], R1, C[0])
    assert mc.certs[C[1]].progress.base_round == R1
    assert not mc.install(C[1], R1, C[0])
    assert mc.certify(C[1], 1, PI(R1, a1))
    assert mc.certify(C[1], 2, PI(R1, a2))
    assert mc.decided == {1: a1, 2: a2}
    assert mc.check_invariants() == []


def test_po_follower_must_fill_slots_in_order():
    mc, chains = _po_machine()
    a1, a2 = chains["replica/0"]
    lead(mc)
    mc.certify_seq(C[0], 1, PI(R1, a1))
    mc.certify_seq(C[0], 2, PI(R1, a2))
    assert mc.install(C[2], R1, C[0])
    # install adopts the snapshot recovered before any certification
    assert mc.certs[C[2]].progress.entries == {}
    assert not mc.certify(C[2], 2, PI(R1, a2))
    assert mc.certify(C[2], 1, PI(R1, a1))
    assert mc.certify(C[2], 2, PI(R1, a2))


def test_install_absent_without_po():
    mc = MultiConsensus(C)
    assert not mc.install(C[0], R1, C[0])


def _walk(seed: int, bounds: ExploreBounds, steps: int = 80):
    rng = random.Random(seed)
    mc = initial_machine(bounds)
    for _ in range(steps):
        moves = enabled_moves(mc, bounds)
        if not moves:
            break
        before = {c: st_.progress.copy() for c, st_ in mc.certs.items()}
        decided = dict(mc.decided)
        move = moves[rng.randrange(len(moves))]
        getattr(mc, move[0])(*move[1:])
        yield mc, before, decided


def _monotone(before: Progress, after: Progress) -> bool:
    for s in set(before.entries) | set(after.entries) | {1}:
        a, b = after.get(s), before.get(s)
        if a != b and not succ(a, b):
            return False
    return True


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_random_walks_monotone_stable_unique(seed, po):
    payload = "register_passive" if po else "client"
    bounds = ExploreBounds(n=3, commands=2, rounds=3, slots=2, replicas=2, payload=payload, po=po)
    for mc, before, decided in _walk(seed, bounds):
        for c, st_ in mc.certs.items():
            assert _monotone(before[c], st_.progress), c
        for slot, cmd in decided.items():
            assert mc.decided[slot] == cmd
        assert all(len(v) == 1 for v in mc.decisions_by_slot().values())
        assert mc.check_invariants() == []
        for r, learned in mc.learned.items():
            for slot, cmd in learned.items():
                assert mc.decided[slot] == cmd
