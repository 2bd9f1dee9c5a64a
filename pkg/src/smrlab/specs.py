"""Abstract replication specifications as guarded transition systems.

Each transition method checks its precondition and either performs the
action (returning ``FIRED``) or returns a falsy ``Blocked`` carrying the
reason.  ``enabled_moves`` enumerates what could fire next so the same
objects serve random walks, exhaustive exploration and refinement replay.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .app import App, Command, Operation, StateUpdate, digest

FIRED = True


class Blocked:
    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"Blocked({self.reason!r})"


class Spec:
    def fire(self, name: str, *args):
        return getattr(self, name)(*args)

    def enabled_moves(self) -> list[tuple]:
        raise NotImplementedError

    def random_walk(self, rng, steps: int) -> list[tuple]:
        fired = []
        for _ in range(steps):
            moves = self.enabled_moves()
            if not moves:
                break
            move = moves[rng.randrange(len(moves))]
            result = self.fire(*move)
            assert result, (move, result)
            fired.append(move)
        return fired


class _Clients:
    """Client-side variables and the invoke/response interface transitions."""

    def _init_clients(self, workload: dict[str, list[Operation]] | None):
        self.inputs: set[Command] = set()
        self.outputs: set[tuple[Command, Any]] = set()
        self.invoked: dict[str, set[str]] = {}
        self.received: dict[str, set[str]] = {}
        self.workload = workload or {}

    def invoke(self, client: str, op: Operation):
        invoked = self.invoked.setdefault(client, set())
        if op.id in invoked:
            return Blocked(f"{op.id} already invoked by {client}")
        invoked.add(op.id)
        self.inputs.add(Command(client, op))
        return FIRED

    def response(self, client: str, op: Operation, result: Any):
        received = self.received.setdefault(client, set())
        if (Command(client, op), result) not in self.outputs:
            return Blocked(f"no output ({client}, {op.id}, {result!r})")
        if op.id in received:
            return Blocked(f"{op.id} already received by {client}")
        received.add(op.id)
        return FIRED

    def _client_moves(self) -> list[tuple]:
        moves = []
        for c, ops in self.workload.items():
            done = self.invoked.get(c, set())
            for op in ops:
                if op.id not in done:
                    moves.append(("invoke", c, op))
                    break
        for cmd, result in sorted(self.outputs, key=repr):
            if cmd.op.id not in self.received.get(cmd.client, set()):
                moves.append(("response", cmd.client, cmd.op, result))
        return moves


class LinearizableService(_Clients, Spec):
    """Invoke / execute / response over a single application state."""

    def __init__(self, app: App, workload: dict[str, list[Operation]] | None = None):
        self.app = app
        self.state = app.initial
        self._init_clients(workload)

    def execute(self, client: str, op: Operation, result: Any = None, new_state: Any = None):
        cmd = Command(client, op)
        if cmd not in self.inputs:
            return Blocked(f"{op.id} not in inputs")
        res, new = self.app.next_state(self.state, cmd)
        if new_state is not None and (res, new) != (result, new_state):
            return Blocked(f"execute {op.id}: expected ({res!r}, {new!r}), got ({result!r}, {new_state!r})")
        self.state = new
        self.outputs.add((cmd, res))
        return FIRED

    def enabled_moves(self) -> list[tuple]:
        moves = self._client_moves()
        for cmd in sorted(self.inputs):
            moves.append(("execute", cmd.client, cmd.op))
        return moves


@dataclass
class ActiveReplica:
    app_state: Any
    version: int = 1
    proposals: dict[int, set] = field(default_factory=dict)
    learned: dict[int, Any] = field(default_factory=dict)


@dataclass
class PassiveReplica(ActiveReplica):
    shadow_state: Any = None
    shadow_version: int = 1


class ActiveReplication(_Clients, Spec):
    """Replicas propose commands into slots; at most one is decided per slot."""

    replica_cls = ActiveReplica

    def __init__(self, app: App, replicas: Iterable[str] = (), workload=None):
        self.app = app
        self.decisions: dict[int, Any] = {}
        self.replicas: dict[str, ActiveReplica] = {}
        for r in replicas:
            self.replica(r)
        self._init_clients(workload)

    def replica(self, r: str) -> ActiveReplica:
        rep = self.replicas.get(r)
        if rep is None:
            rep = self.replicas[r] = self._new_replica()
        return rep

    def _new_replica(self):
        return ActiveReplica(self.app.initial)

    def propose(self, r: str, slot: int, cmd: Command):
        rep = self.replica(r)
        if cmd not in self.inputs:
            return Blocked(f"{cmd.op.id} not in inputs")
        if rep.learned.get(slot) is not None:
            return Blocked(f"{r} already learned slot {slot}")
        rep.proposals.setdefault(slot, set()).add(cmd)
        return FIRED

    def decide(self, slot: int, cmd: Command):
        if self.decisions.get(slot) is not None:
            return Blocked(f"slot {slot} already decided")
        if not any(cmd in rep.proposals.get(slot, ()) for rep in self.replicas.values()):
            return Blocked(f"{cmd!r} never proposed for slot {slot}")
        self.decisions[slot] = cmd
        return FIRED

    def learn(self, r: str, slot: int):
        rep = self.replica(r)
        if rep.learned.get(slot) is not None:
            return Blocked(f"{r} already learned slot {slot}")
        if self.decisions.get(slot) is None:
            return Blocked(f"slot {slot} undecided")
        rep.learned[slot] = self.decisions[slot]
        return FIRED

    def update(self, r: str, cmd: Command, result: Any, new_state: Any):
        rep = self.replica(r)
        learned = rep.learned.get(rep.version)
        if learned is None or learned != cmd:
            return Blocked(f"{r} version {rep.version}: learned {learned!r}, not {cmd!r}")
        if self.app.next_state(rep.app_state, cmd) != (result, new_state):
            return Blocked(f"{r}: ({result!r}, {new_state!r}) is not nextState of {rep.app_state!r}")
        self.outputs.add((cmd, result))
        rep.app_state = new_state
        rep.version += 1
        return FIRED

    # -- exploration helpers ----------------------------------------------
    def _propose_slot(self, rep: ActiveReplica) -> int:
        slot = 1
        while rep.proposals.get(slot) or rep.learned.get(slot) is not None:
            slot += 1
        return slot

    def enabled_moves(self) -> list[tuple]:
        moves = self._client_moves()
        for r, rep in sorted(self.replicas.items()):
            slot = self._propose_slot(rep)
            for cmd in sorted(self.inputs):
                moves.append(("propose", r, slot, cmd))
            cmd = rep.learned.get(rep.version)
            if cmd is not None:
                res, new = self.app.next_state(rep.app_state, cmd)
                moves.append(("update", r, cmd, res, new))
            for slot, value in sorted(self.decisions.items()):
                if value is not None and rep.learned.get(slot) is None:
                    moves.append(("learn", r, slot))
        proposed = {}
        for rep in self.replicas.values():
            for slot, cmds in rep.proposals.items():
                proposed.setdefault(slot, set()).update(cmds)
        for slot, cmds in sorted(proposed.items()):
            if self.decisions.get(slot) is None:
                for cmd in sorted(cmds, key=repr):
                    moves.append(("decide", slot, cmd))
        return moves

    # -- invariants ----------------------------------------------------------
    def violations(self) -> list[str]:
        out = []
        for r, rep in self.replicas.items():
            for slot, value in rep.learned.items():
                if value is not None and self.decisions.get(slot) != value:
                    out.append(f"{r} learned {value!r} in slot {slot}, decided {self.decisions.get(slot)!r}")
            state = self.app.initial
            for slot in range(1, rep.version):
                state = self._fold(state, rep.learned[slot])
            if state != rep.app_state:
                out.append(f"{r}: appState {rep.app_state!r} != replay {state!r}")
        return out

    def _fold(self, state, value):
        return self.app.next_state(state, value)[1]


class PassiveReplication(ActiveReplication):
    """Primaries propose speculative state updates; decisions respect prefix order."""

    def _new_replica(self):
        return PassiveReplica(self.app.initial, shadow_state=self.app.initial)

    def propose(self, r: str, slot: int, cmd: Command, result: Any = None, new_state: Any = None):
        rep = self.replica(r)
        if cmd not in self.inputs:
            return Blocked(f"{cmd.op.id} not in inputs")
        if slot != rep.shadow_version:
            return Blocked(f"{r}: slot {slot} != shadowVersion {rep.shadow_version}")
        if rep.learned.get(slot) is not None:
            return Blocked(f"{r} already learned slot {slot}")
        res, new = self.app.next_state(rep.shadow_state, cmd)
        if result is not None or new_state is not None:
            if (res, new) != (result, new_state):
                return Blocked(f"{r}: ({result!r}, {new_state!r}) is not nextState of shadow {rep.shadow_state!r}")
        rep.proposals.setdefault(slot, set()).add(StateUpdate(rep.shadow_state, cmd, res, new))
        rep.shadow_state = new
        rep.shadow_version = slot + 1
        return FIRED

    def decide(self, slot: int, cmd: Command, result: Any, new_state: Any, old: Any = None):
        """Decide ``(cmd, result, new_state)``; ``old`` optionally pins the witness proposal."""
        if self.decisions.get(slot) is not None:
            return Blocked(f"slot {slot} already decided")
        prior = self.decisions.get(slot - 1) if slot > 1 else None
        if slot > 1 and prior is None:
            return Blocked(f"slot {slot - 1} undecided")
        for rep in self.replicas.values():
            for u in rep.proposals.get(slot, ()):
                if (u.cmd, u.result, u.new) != (cmd, result, new_state):
                    continue
                if old is not None and u.old != old:
                    continue
                if slot > 1 and digest(self.app.encode_state(prior.new)) != digest(self.app.encode_state(u.old)):
                    continue
                self.decisions[slot] = u
                return FIRED
        return Blocked(f"no proposal ({cmd.op.id}, {result!r}, {new_state!r}) in slot {slot} extends the prior decision")

    def update(self, r: str, cmd: Command, result: Any, new_state: Any):
        rep = self.replica(r)
        learned = rep.learned.get(rep.version)
        if learned is None or (learned.cmd, learned.result, learned.new) != (cmd, result, new_state):
            return Blocked(f"{r} version {rep.version}: learned {learned!r}")
        self.outputs.add((cmd, result))
        rep.app_state = new_state
        rep.version += 1
        return FIRED

    def reset_shadow(self, r: str, version: int, state: Any):
        rep = self.replica(r)
        if version < rep.version:
            return Blocked(f"{r}: shadow version {version} < version {rep.version}")
        if version == rep.version and state != rep.app_state:
            return Blocked(f"{r}: shadow state {state!r} != appState {rep.app_state!r}")
        rep.shadow_state = state
        rep.shadow_version = version
        return FIRED

    def enabled_moves(self) -> list[tuple]:
        moves = self._client_moves()
        for r, rep in sorted(self.replicas.items()):
            if rep.learned.get(rep.shadow_version) is None:
                for cmd in sorted(self.inputs):
                    res, new = self.app.next_state(rep.shadow_state, cmd)
                    moves.append(("propose", r, rep.shadow_version, cmd, res, new))
            u = rep.learned.get(rep.version)
            if u is not None:
                moves.append(("update", r, u.cmd, u.result, u.new))
            for slot, value in sorted(self.decisions.items()):
                if value is not None and rep.learned.get(slot) is None:
                    moves.append(("learn", r, slot))
            if rep.shadow_version != rep.version or rep.shadow_state != rep.app_state:
                moves.append(("reset_shadow", r, rep.version, rep.app_state))
        for slot in sorted({s for rep in self.replicas.values() for s in rep.proposals}):
            if self.decisions.get(slot) is not None:
                continue
            for rep in self.replicas.values():
                for u in sorted(rep.proposals.get(slot, ()), key=repr):
                    move = ("decide", slot, u.cmd, u.result, u.new, u.old)
                    if move not in moves and self._decidable(slot, u):
                        moves.append(move)
        return moves

    def _decidable(self, slot: int, u: StateUpdate) -> bool:
        if slot == 1:
            return True
        prior = self.decisions.get(slot - 1)
        return prior is not None and prior.new == u.old

    def violations(self) -> list[str]:
        out = []
        for slot, u in self.decisions.items():
            if slot > 1 and u is not None:
                prior = self.decisions.get(slot - 1)
                if prior is None or prior.new != u.old:
                    out.append(f"slot {slot}: update on {u.old!r} does not extend slot {slot - 1}")
        return out + super().violations()

    def _fold(self, state, value):
        return value.new
