"""Bounded exhaustive exploration of MultiConsensus interleavings.

Breadth-first over every enabled transition within the bounds, checking the
safety properties in each reachable state.  Exceeding ``max_states`` marks
the report incomplete; nothing is silently truncated.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable

from .app import Command, Operation, RegisterApp
from .multiconsensus import PI, MultiConsensus, succ

PROPERTIES = ("agreement", "round_slot_uniqueness", "single_sequencer", "prefix_order")


@dataclass
class ExploreBounds:
    n: int = 3
    commands: int = 2
    rounds: int = 2
    slots: int = 1
    replicas: int = 0
    payload: str = "client"  # or "register_passive": the inc/double state updates from initial 3
    po: bool = False
    coords: str = "any"  # "any" certifier may be named coordinator, or "rota": one fixed per round
    max_states: int = 2_000_000
    goal: str | None = None  # "4_then_7" searches for that decided sequence
    stop_at_goal: bool = False  # end the search once the goal is reached (report then incomplete)

    def __post_init__(self):
        if self.n < 1 or self.rounds < 0 or self.slots < 0 or self.commands < 0:
            raise ValueError("bounds must be non-negative (n >= 1)")
        if self.payload not in ("client", "register_passive"):
            raise ValueError(f"unknown payload {self.payload!r}")
        if self.coords not in ("any", "rota"):
            raise ValueError(f"unknown coords {self.coords!r}")
        if self.goal is not None and self.goal not in GOALS:
            raise ValueError(f"unknown goal {self.goal!r}")


@dataclass
class ExploreReport:
    bounds: ExploreBounds
    states: int = 0
    edges: int = 0
    complete: bool = True
    violations: dict[str, str] = field(default_factory=dict)
    counterexample: list[tuple] | None = None
    goal_reached: bool = False
    goal_path: list[tuple] | None = None

    @property
    def safe(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {
            "states": self.states,
            "edges": self.edges,
            "complete": self.complete,
            "safe": self.safe,
            "violations": self.violations,
            "goal_reached": self.goal_reached,
            "goal_path": [list(map(repr, m)) for m in self.goal_path or []],
            "counterexample": [list(map(repr, m)) for m in self.counterexample or []],
        }


def register_updates():
    """The two competing primaries on a register initialised to 3."""
    app = RegisterApp(3)
    inc = Command("client/0", Operation("inc", "inc"))
    dbl = Command("client/1", Operation("double", "double"))
    a1 = app.make_update(3, inc)  # 3 -> 4
    a2 = app.make_update(a1.new, dbl)  # 4 -> 8
    b1 = app.make_update(3, dbl)  # 3 -> 6
    b2 = app.make_update(b1.new, inc)  # 6 -> 7
    return app, {"replica/0": [a1, a2], "replica/1": [b1, b2]}


def initial_machine(bounds: ExploreBounds) -> MultiConsensus:
    certs = [f"certifier/{i}" for i in range(bounds.n)]
    if bounds.payload == "client":
        mc = MultiConsensus(certs, po=bounds.po)
        cmds = [Command("client/0", Operation(f"op{k}", "inc")) for k in range(bounds.commands)]
        for slot in range(1, bounds.slots + 1):
            for cmd in cmds:
                mc.propose("replica/0", slot, cmd)
    else:
        app, chains = register_updates()
        mc = MultiConsensus(certs, po=bounds.po, app=app)
        for r, chain in chains.items():
            for slot, u in enumerate(chain[: bounds.slots], 1):
                mc.propose(r, slot, u)
    return mc


def _rounds(bounds: ExploreBounds) -> list[tuple]:
    return [(k, 0) for k in range(1, bounds.rounds + 1)]


def enabled_moves(mc: MultiConsensus, bounds: ExploreBounds) -> list[tuple]:
    moves = []
    rounds = _rounds(bounds)
    for i, c in enumerate(mc.names):
        st = mc.certs[c]
        for rnd in rounds:
            if rnd > st.cert_bev:
                if bounds.coords == "any":
                    coords = mc.names
                else:
                    coords = [mc.names[(rnd[0] - 1) % mc.n]]
                for coord in coords:
                    moves.append(("support_round", c, rnd, coord))
        if not st.is_seq and st.cert_bev in rounds:
            mine = sorted(
                src for (src, rnd), (coord, _) in mc.snapshots.items() if rnd == st.cert_bev and coord == c
            )
            need = mc.n // 2 + 1
            for k in range(need, len(mine) + 1):
                for subset in combinations(mine, k):
                    moves.append(("recover", c, st.cert_bev, subset))
        if st.is_seq:
            slot = st.progress.lowest_empty(st.cert_bev)
            if slot is not None and slot <= bounds.slots:
                cands = set()
                for props in mc.proposals.values():
                    cands.update(props.get(slot, ()))
                for cmd in sorted(cands, key=repr):
                    moves.append(("certify_seq", c, slot, PI(st.cert_bev, cmd)))
        for (slot, pi), holders in mc.tally.items():
            if pi.round == st.cert_bev and c not in holders and succ(pi, st.progress.get(slot)):
                moves.append(("certify", c, slot, pi))
        if mc.po and st.cert_bev in mc.recovered and st.progress.base_round < st.cert_bev:
            moves.append(("install", c, st.cert_bev, mc.recovered[st.cert_bev][0]))
    for k in range(bounds.replicas):
        r = f"replica/{k}"
        learned = mc.learned.get(r, {})
        for slot, cmd in sorted(mc.majorities, key=repr):
            if learned.get(slot) is None:
                moves.append(("observe_decision", r, slot, cmd))
    return moves


def state_violations(mc: MultiConsensus) -> dict[str, str]:
    out = {}
    for slot, cmds in mc.decisions_by_slot().items():
        if len(cmds) > 1:
            out["agreement"] = f"slot {slot} decided {sorted(map(repr, cmds))}"
    for v in mc.violations:
        if "certified" in v and "round" in v:
            out.setdefault("round_slot_uniqueness", v)
    seqs: dict[tuple, list] = {}
    for c, st in mc.certs.items():
        if st.is_seq:
            seqs.setdefault(st.cert_bev, []).append(c)
    for rnd, who in seqs.items():
        if len(who) > 1:
            out["single_sequencer"] = f"round {rnd}: {who}"
    if mc.app is not None:
        for s in sorted(mc.decided):
            if s > 1 and (s - 1 not in mc.decided or mc.decided[s - 1].new != mc.decided[s].old):
                out["prefix_order"] = f"slot {s} does not extend slot {s - 1}"
    return out


GOALS: dict[str, Callable[[MultiConsensus], bool]] = {
    "4_then_7": lambda mc: (
        mc.decided.get(1) is not None
        and mc.decided.get(2) is not None
        and mc.decided[1].new == 4
        and mc.decided[2].new == 7
    ),
}


def explore(bounds: ExploreBounds, properties: tuple[str, ...] = PROPERTIES) -> ExploreReport:
    report = ExploreReport(bounds)
    goal = GOALS[bounds.goal] if bounds.goal else None
    root = initial_machine(bounds)
    parents: list[tuple[int, Any]] = [(-1, None)]
    seen = {root.key(): 0}
    queue = deque([(0, root)])

    def path(idx: int) -> list[tuple]:
        out = []
        while idx > 0:
            idx, move = parents[idx][0], parents[idx][1]
            out.append(move)
        return out[::-1]

    while queue:
        idx, mc = queue.popleft()
        bad = {k: v for k, v in state_violations(mc).items() if k in properties}
        if bad:
            for k, v in bad.items():
                if k not in report.violations:
                    report.violations[k] = v
                    if report.counterexample is None:
                        report.counterexample = path(idx)
        if goal is not None and not report.goal_reached and goal(mc):
            report.goal_reached = True
            report.goal_path = path(idx)
            if bounds.stop_at_goal:
                report.complete = not queue
                break
        for move in enabled_moves(mc, bounds):
            nxt = mc.clone()
            fired = getattr(nxt, move[0])(*move[1:])
            if not fired:
                continue
            report.edges += 1
            key = nxt.key()
            if key in seen:
                continue
            if len(seen) >= bounds.max_states:
                report.complete = False
                continue
            seen[key] = len(parents)
            parents.append((idx, move))
            queue.append((seen[key], nxt))
    report.states = len(seen)
    return report
