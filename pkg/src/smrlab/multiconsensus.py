"""MultiConsensus and its prefix-ordered (PO) restriction.

Certifiers certify commands into slots within totally ordered rounds.  A
command is decided once more than ``n/2`` certifiers certify it in the same
round.  All global sets (``certified``, ``snapshots``) are grow-only.

Round ids are ``(counter, owner)`` tuples compared lexicographically;
``ROUND0 == (0, 0)`` is the initial round.  Commands are opaque hashables:
client commands for active replication, ``StateUpdate`` for PO mode.

PO mode adds the two ordering preconditions plus ``install``: a certifier
overwrites its progress with the recovered snapshot of its round's
sequencer before certifying anything in that round, so all of its slots
carry the same round id.
"""
from __future__ import annotations

from itertools import count
from typing import Any, Iterable, NamedTuple

from .app import digest
from .specs import FIRED, Blocked

ROUND0 = (0, 0)


class InvariantViolation(Exception):
    pass


class PI(NamedTuple):
    """Progress indicator ``<round, cmd>``; ``cmd is None`` stands for bottom."""

    round: tuple
    cmd: Any


def succ(a: PI, b: PI) -> bool:
    """``a`` strictly above ``b`` in the progress-indicator order."""
    if a.round != b.round:
        return a.round > b.round
    return a.cmd is not None and b.cmd is None


def pi_compare(a: PI, b: PI) -> int:
    """-1, 0 or 1.  Two different non-bottom commands in one round is a violation."""
    if a.round == b.round and a.cmd is not None and b.cmd is not None and a.cmd != b.cmd:
        raise InvariantViolation(f"round {a.round}: distinct commands {a.cmd!r} / {b.cmd!r}")
    if succ(a, b):
        return 1
    if succ(b, a):
        return -1
    return 0


def pi_max(pis: Iterable[PI]) -> PI:
    best = None
    for pi in pis:
        if best is None or pi_compare(pi, best) > 0:
            best = pi
    return best


class Progress:
    """A progress array: explicit non-bottom slots over a ``<base_round, bottom>`` default."""

    __slots__ = ("base_round", "entries")

    def __init__(self, base_round: tuple = ROUND0, entries: dict[int, PI] | None = None):
        self.base_round = base_round
        self.entries = dict(entries or {})

    def get(self, slot: int) -> PI:
        pi = self.entries.get(slot)
        return pi if pi is not None else PI(self.base_round, None)

    def copy(self) -> "Progress":
        return Progress(self.base_round, self.entries)

    def freeze(self) -> tuple:
        return (self.base_round, tuple(sorted(self.entries.items())))

    @classmethod
    def thaw(cls, frozen: tuple) -> "Progress":
        return cls(frozen[0], dict(frozen[1]))

    def lowest_empty(self, rnd: tuple) -> int | None:
        """Lowest slot holding ``<rnd, bottom>``, if any."""
        if self.base_round != rnd:
            return None
        for s in count(1):
            if s not in self.entries:
                return s

    def stamp(self) -> tuple:
        """Round-stamp of a uniformly-stamped (PO) array: ``(round, certified count)``."""
        return (self.base_round, len(self.entries))

    def __eq__(self, other) -> bool:
        return isinstance(other, Progress) and self.freeze() == other.freeze()

    def __repr__(self) -> str:
        return f"Progress({self.base_round}, {self.entries})"


class CertState:
    __slots__ = ("cert_bev", "is_seq", "progress")

    def __init__(self, cert_bev=ROUND0, is_seq=False, progress=None):
        self.cert_bev = cert_bev
        self.is_seq = is_seq
        self.progress = progress if progress is not None else Progress()

    def copy(self) -> "CertState":
        return CertState(self.cert_bev, self.is_seq, self.progress.copy())


class MultiConsensus:
    """Executable MultiConsensus over ``n`` named certifiers.

    Besides the state proper, each transition leaves ``last_added`` (new
    ``certified`` entries) and ``last_decided`` (``(slot, cmd)`` pairs that
    first reached a majority) for refinement mappings to consume.
    """

    def __init__(self, certifiers: Iterable[str], *, po: bool = False, app=None):
        self.names = list(certifiers)
        self.n = len(self.names)
        self.po = po
        self.app = app
        self.certs = {c: CertState() for c in self.names}
        self.certified: set[tuple] = set()
        self.snapshots: dict[tuple, tuple] = {}  # (cert, round) -> (coord, frozen progress)
        self.proposals: dict[str, dict[int, set]] = {}
        self.learned: dict[str, dict[int, Any]] = {}
        self.recovered: dict[tuple, tuple] = {}  # round -> (sequencer, frozen progress)
        self.appointed: dict[tuple, tuple] = {}  # round -> (manager, sequencer)
        self.tally: dict[tuple, set] = {}  # (slot, PI) -> certifiers
        self.per_round: dict[tuple, Any] = {}  # (slot, round) -> cmd
        self.decided: dict[int, Any] = {}
        self.majorities: set[tuple] = set()  # (slot, cmd) ever decided
        self.violations: list[str] = []
        self.last_added: list[tuple] = []
        self.last_decided: list[tuple] = []

    # -- helpers -------------------------------------------------------------
    def majority(self, k: int) -> bool:
        return 2 * k > self.n

    def _begin(self) -> None:
        self.last_added = []
        self.last_decided = []

    def _set_progress(self, c: str, slot: int, pi: PI) -> None:
        st = self.certs[c]
        old = st.progress.get(slot)
        if old != pi and not succ(pi, old):
            self.violations.append(f"{c} slot {slot}: progress {old} -> {pi} is not monotone")
        st.progress.entries[slot] = pi

    def _add_certified(self, c: str, slot: int, pi: PI) -> None:
        entry = (c, slot, pi)
        if entry in self.certified:
            return
        self.certified.add(entry)
        self.last_added.append(entry)
        prior = self.per_round.setdefault((slot, pi.round), pi.cmd)
        if prior != pi.cmd:
            self.violations.append(f"slot {slot} round {pi.round}: certified {prior!r} and {pi.cmd!r}")
        holders = self.tally.setdefault((slot, pi), set())
        holders.add(c)
        if self.majority(len(holders)) and (slot, pi.cmd) not in self.majorities:
            self.majorities.add((slot, pi.cmd))
            if slot in self.decided:
                self.violations.append(f"slot {slot}: decided {self.decided[slot]!r} then {pi.cmd!r}")
            else:
                self.decided[slot] = pi.cmd
                self.last_decided.append((slot, pi.cmd))

    def has_majority(self, slot: int, cmd: Any) -> bool:
        return (slot, cmd) in self.majorities

    def proposed(self, slot: int, cmd: Any) -> bool:
        return any(cmd in props.get(slot, ()) for props in self.proposals.values())

    def _chains(self, prev: Any, cmd: Any) -> bool:
        if prev is None or not hasattr(cmd, "old"):
            return False
        if self.app is None:
            return prev.new == cmd.old
        enc = self.app.encode_state
        return digest(enc(prev.new)) == digest(enc(cmd.old))

    # -- transitions inherited from replication --------------------------------
    def propose(self, r: str, slot: int, cmd: Any):
        self._begin()
        if self.learned.get(r, {}).get(slot) is not None:
            return Blocked(f"{r} already learned slot {slot}")
        self.proposals.setdefault(r, {}).setdefault(slot, set()).add(cmd)
        return FIRED

    # -- MultiConsensus transitions ---------------------------------------------
    def certify_seq(self, c: str, slot: int, pi: PI):
        self._begin()
        st = self.certs[c]
        if not st.is_seq:
            return Blocked(f"{c} is not sequencer")
        if pi.round != st.cert_bev:
            return Blocked(f"{c} supports {st.cert_bev}, not {pi.round}")
        if pi.cmd is None:
            return Blocked("cannot certify bottom")
        if st.progress.get(slot) != PI(pi.round, None):
            return Blocked(f"{c} slot {slot} holds {st.progress.get(slot)}")
        if st.progress.lowest_empty(pi.round) != slot:
            return Blocked(f"{c}: slot {slot} is not the lowest empty slot")
        if not self.proposed(slot, pi.cmd):
            return Blocked(f"{pi.cmd!r} not proposed for slot {slot}")
        if self.po and slot > 1:
            prev = st.progress.get(slot - 1)
            if prev.round != pi.round or not self._chains(prev.cmd, pi.cmd):
                return Blocked(f"PO: slot {slot} update does not extend {c}'s slot {slot - 1}")
        self._set_progress(c, slot, pi)
        self._add_certified(c, slot, pi)
        return FIRED

    def certify(self, c: str, slot: int, pi: PI):
        self._begin()
        st = self.certs[c]
        if not self.tally.get((slot, pi)):
            return Blocked(f"nobody certified {pi} in slot {slot}")
        if st.cert_bev != pi.round:
            return Blocked(f"{c} supports {st.cert_bev}, not {pi.round}")
        if not succ(pi, st.progress.get(slot)):
            return Blocked(f"{pi} does not exceed {c}'s {st.progress.get(slot)}")
        if self.po:
            if st.progress.base_round != pi.round:
                return Blocked(f"PO: {c} has not installed round {pi.round}")
            if slot > 1:
                prev = st.progress.get(slot - 1)
                if prev.round != pi.round or prev.cmd is None:
                    return Blocked(f"PO: {c} has not certified slot {slot - 1} in {pi.round}")
        self._set_progress(c, slot, pi)
        self._add_certified(c, slot, pi)
        return FIRED

    def observe_decision(self, r: str, slot: int, cmd: Any):
        self._begin()
        if self.learned.get(r, {}).get(slot) is not None:
            return Blocked(f"{r} already learned slot {slot}")
        if not self.has_majority(slot, cmd):
            return Blocked(f"no round has a majority for {cmd!r} in slot {slot}")
        self.learned.setdefault(r, {})[slot] = cmd
        return FIRED

    def support_round(self, c: str, rnd: tuple, coord: str):
        self._begin()
        st = self.certs[c]
        if not rnd > st.cert_bev:
            return Blocked(f"{c} already supports {st.cert_bev} >= {rnd}")
        st.cert_bev = rnd
        st.is_seq = False
        self.snapshots[(c, rnd)] = (coord, st.progress.freeze())
        return FIRED

    def appoint(self, v: str, rnd: tuple, seq: str):
        """A round's coordinator hands the sequencer role to ``seq`` (view managers)."""
        self._begin()
        snap = self.snapshots.get((v, rnd))
        if snap is None or snap[0] != v:
            return Blocked(f"{v} does not coordinate round {rnd}")
        if rnd in self.appointed:
            return Blocked(f"round {rnd} already has an appointed sequencer")
        self.appointed[rnd] = (v, seq)
        return FIRED

    def _coordinated_by(self, coord: str, rnd: tuple, c: str) -> bool:
        return coord == c or self.appointed.get(rnd) == (coord, c)

    def recover(self, c: str, rnd: tuple, sources: Iterable[str]):
        self._begin()
        st = self.certs[c]
        sources = sorted(set(sources))
        if st.cert_bev != rnd:
            return Blocked(f"{c} supports {st.cert_bev}, not {rnd}")
        if st.is_seq:
            return Blocked(f"{c} already recovered {rnd}")
        if not self.majority(len(sources)):
            return Blocked(f"{len(sources)} snapshots are not a majority")
        progs = []
        for src in sources:
            snap = self.snapshots.get((src, rnd))
            if snap is None or not self._coordinated_by(snap[0], rnd, c):
                return Blocked(f"no snapshot from {src} for {rnd} naming {c}")
            progs.append(Progress.thaw(snap[1]))
        slots = sorted({s for p in progs for s in p.entries})
        recovered = Progress(rnd)
        try:
            for s in slots:
                best = pi_max(p.get(s) for p in progs)
                if best.cmd is not None:
                    recovered.entries[s] = PI(rnd, best.cmd)
        except InvariantViolation as exc:
            self.violations.append(f"recover {c} {rnd}: {exc}")
            return Blocked(str(exc))
        st.progress = recovered
        for s, pi in sorted(recovered.entries.items()):
            self._add_certified(c, s, pi)
        st.is_seq = True
        self.recovered[rnd] = (c, recovered.freeze())
        return FIRED

    def install(self, c: str, rnd: tuple, coord: str):
        """PO only: adopt the recovered snapshot of ``rnd``'s sequencer wholesale."""
        self._begin()
        if not self.po:
            return Blocked("install exists only in PO mode")
        st = self.certs[c]
        if st.cert_bev != rnd:
            return Blocked(f"{c} supports {st.cert_bev}, not {rnd}")
        if not st.progress.base_round < rnd:
            return Blocked(f"{c} already holds round {st.progress.base_round}")
        rec = self.recovered.get(rnd)
        if rec is None or rec[0] != coord:
            return Blocked(f"{coord} has not recovered round {rnd}")
        new = Progress.thaw(rec[1])
        for s in set(new.entries) | set(st.progress.entries):
            old, pi = st.progress.get(s), new.get(s)
            if old != pi and not succ(pi, old):
                self.violations.append(f"install {c} slot {s}: {old} -> {pi} is not monotone")
        st.progress = new
        for s, pi in sorted(new.entries.items()):
            self._add_certified(c, s, pi)
        return FIRED

    # -- whole-state views -------------------------------------------------------
    def check_invariants(self) -> list[str]:
        out = list(self.violations)
        seqs: dict[tuple, set] = {}
        for c, st in self.certs.items():
            if st.is_seq:
                seqs.setdefault(st.cert_bev, set()).add(c)
        for rnd, who in seqs.items():
            if len(who) > 1:
                out.append(f"round {rnd} has sequencers {sorted(who)}")
        if self.po:
            slots = sorted(self.decided)
            for s in slots:
                if s > 1 and s - 1 not in self.decided:
                    out.append(f"PO: slot {s} decided before slot {s - 1}")
                elif s > 1 and not self._chains(self.decided[s - 1], self.decided[s]):
                    out.append(f"PO: slot {s} does not extend slot {s - 1}")
        return out

    def decisions_by_slot(self) -> dict[int, set]:
        out: dict[int, set] = {}
        for slot, cmd in self.majorities:
            out.setdefault(slot, set()).add(cmd)
        return out

    def clone(self) -> "MultiConsensus":
        new = MultiConsensus.__new__(MultiConsensus)
        new.names = self.names
        new.n = self.n
        new.po = self.po
        new.app = self.app
        new.certs = {c: st.copy() for c, st in self.certs.items()}
        new.certified = set(self.certified)
        new.snapshots = dict(self.snapshots)
        new.proposals = {r: {s: set(v) for s, v in p.items()} for r, p in self.proposals.items()}
        new.learned = {r: dict(v) for r, v in self.learned.items()}
        new.recovered = dict(self.recovered)
        new.appointed = dict(self.appointed)
        new.tally = {k: set(v) for k, v in self.tally.items()}
        new.per_round = dict(self.per_round)
        new.decided = dict(self.decided)
        new.majorities = set(self.majorities)
        new.violations = list(self.violations)
        new.last_added = []
        new.last_decided = []
        return new

    def key(self) -> tuple:
        """Canonical hashable encoding of the state (derived indexes excluded)."""
        return (
            tuple((c, st.cert_bev, st.is_seq, st.progress.freeze()) for c, st in self.certs.items()),
            frozenset(self.certified),
            frozenset(self.snapshots.items()),
            frozenset((r, s, v) for r, p in self.learned.items() for s, v in p.items()),
            frozenset((r, s, frozenset(v)) for r, p in self.proposals.items() for s, v in p.items()),
            frozenset(self.recovered.items()),
            frozenset(self.appointed.items()),
        )
