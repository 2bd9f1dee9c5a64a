"""Shared engine machinery.

A ``Cluster`` owns the simulator, the network, the client processes and an
online safety monitor.  Protocol subclasses add certifier and replica nodes
that emit trace events named after the MultiConsensus transitions they
implement, so that any run can be replayed against the abstract specs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..app import Command, Operation, make_app
from ..codec import _plain, enc_cmd, enc_payload, enc_progress
from ..config import ScenarioConfig
from ..kernel import ENV, ConfigError, Network, Simulator, TraceEvent, certifier, client, replica

TRACE_VERSION = 1


def ckey(raw: Any) -> str:
    """Hashable key of an encoded payload."""
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


class SafetyMonitor:
    """Tracks certifications from the trace as it is produced.

    Flags two distinct commands decided for one slot, two certifications of
    different commands in one ``(slot, round)``, and replicas whose update
    histories diverge.
    """

    def __init__(self, n: int):
        self.n = n
        self.tally: dict[tuple, set] = {}  # (slot, round, key) -> certifiers
        self.per_round: dict[tuple, str] = {}
        self.decided: dict[int, str] = {}
        self.decided_at: dict[int, tuple] = {}  # slot -> (time, seq, round)
        self.recovered: dict[tuple, list] = {}
        self.sequencer: dict[tuple, str] = {}
        self.updates: dict[str, list] = {}
        self.violations: list[str] = []
        self.new_majorities: list[tuple] = []

    def _certified(self, ev: TraceEvent, c: str, slot: int, rnd: tuple, raw: Any) -> None:
        key = ckey(raw)
        prior = self.per_round.setdefault((slot, rnd), key)
        if prior != key:
            self.violations.append(f"seq {ev.seq}: slot {slot} round {list(rnd)} certified twice differently")
        holders = self.tally.setdefault((slot, rnd, key), set())
        if c in holders:
            return
        holders.add(c)
        if 2 * len(holders) > self.n and len(holders) - 1 <= self.n // 2:
            have = self.decided.get(slot)
            if have is None:
                self.decided[slot] = key
                self.decided_at[slot] = (ev.time, ev.seq, rnd)
                self.new_majorities.append((slot, rnd, key))
            elif have != key:
                self.violations.append(f"seq {ev.seq}: agreement violated in slot {slot}")

    def observe(self, ev: TraceEvent) -> None:
        t, p = ev.transition, ev.params
        if t in ("certifySeq", "certify"):
            rnd = tuple(p["round"])
            if t == "certifySeq":
                self.sequencer[rnd] = ev.process
            self._certified(ev, ev.process, p["slot"], rnd, p["cmd"])
        elif t == "recover":
            rnd = tuple(p["round"])
            self.sequencer[rnd] = ev.process
            slots = p["progress"]["slots"]
            self.recovered[rnd] = slots
            for s, (r, raw) in slots:
                self._certified(ev, ev.process, s, tuple(r), raw)
        elif t == "install":
            rnd = tuple(p["round"])
            for s, (r, raw) in self.recovered.get(rnd, []):
                self._certified(ev, ev.process, s, tuple(r), raw)
        elif t == "update":
            hist = self.updates.setdefault(ev.process, [])
            entry = ckey([p["cmd"], p["result"], p["new"]])
            hist.append(entry)
            k = len(hist) - 1
            for other, h in self.updates.items():
                if other != ev.process and len(h) > k and h[k] != entry:
                    self.violations.append(f"seq {ev.seq}: {ev.process} and {other} diverge at version {k + 1}")
                    break


@dataclass
class RunResult:
    config: ScenarioConfig
    trace: list[TraceEvent]
    violations: list[str]
    completed: bool
    decided: int
    end_time: int
    extra: dict = field(default_factory=dict)

    @property
    def safe(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        return [ev.to_json() for ev in self.trace]


def make_workload(cfg: ScenarioConfig, app, rng) -> dict[str, list[Operation]]:
    out = {}
    if cfg.workload is not None:
        for cl, ops in sorted(cfg.workload.items(), key=lambda kv: int(kv[0])):
            seq = []
            for k, op in enumerate(ops):
                kind, arg = op[0], op[1] if len(op) > 1 else None
                op_id = op[2] if len(op) > 2 else f"c{cl}-{k}"
                arg = tuple(arg) if isinstance(arg, list) else arg
                seq.append(Operation(op_id, kind, arg))
            out[client(int(cl))] = seq
        return out
    for i in range(cfg.clients):
        out[client(i)] = [app.random_op(rng, f"c{i}-{k}") for k in range(cfg.ops_per_client)]
    return out


class ClientNode:
    """Closed-loop client: one outstanding operation, retried until answered."""

    def __init__(self, cluster: "Cluster", pid: str, ops: list[Operation]):
        self.cluster = cluster
        self.pid = pid
        self.ops = ops
        self.idx = 0
        self.waiting: Command | None = None
        self.attempt = 0
        self.done = not ops

    def start(self) -> None:
        self.cluster.sim.schedule(self.pid, 0, self._next, label="start")

    def _next(self) -> None:
        if self.idx >= len(self.ops):
            self.done = True
            return
        op = self.ops[self.idx]
        self.waiting = Command(self.pid, op)
        self.attempt = 0
        self.cluster.rec(self.pid, "invoke", op=enc_cmd(self.waiting)["op"])
        self._send()

    def _send(self) -> None:
        cmd = self.waiting
        targets = self.cluster.request_targets(self.pid, self.attempt)
        self.attempt += 1
        self.cluster.net.send(self.pid, "REQUEST", {"cmd": cmd}, targets, {"op": cmd.op.id})
        self.cluster.sim.schedule(self.pid, self.cluster.cfg.client_retry, self._retry, cmd, label="client-timer")

    def _retry(self, cmd: Command) -> None:
        if self.waiting == cmd:
            self.cluster.rec(self.pid, "timer", what="retry", op=cmd.op.id)
            self._send()

    def on_message(self, msg) -> None:
        if msg.tag != "REPLY" or self.waiting is None:
            return
        cmd, result = msg.payload["cmd"], msg.payload["result"]
        if cmd != self.waiting:
            return
        self.cluster.rec(self.pid, "response", op=enc_cmd(cmd)["op"], result=_plain(result))
        self.waiting = None
        self.idx += 1
        self._next()


class ReplicaCore:
    """Learned log plus in-order application, shared by every engine.

    ``passive`` replicas apply decided state updates; active ones execute
    decided commands.  ``on_apply(cmd, result)`` runs after each update.
    """

    def __init__(self, cluster: "Cluster", pid: str, passive: bool, on_apply=None):
        self.cluster = cluster
        self.pid = pid
        self.passive = passive
        self.app = cluster.app
        self.learned: dict[int, Any] = {}
        self.app_state = self.app.initial
        self.version = 1
        self.shadow_state = self.app.initial
        self.shadow_version = 1
        self.outputs: dict[tuple, tuple] = {}
        self.on_apply = on_apply

    def knows(self, cmd: Command) -> bool:
        return (cmd.client, cmd.op.id) in self.outputs

    def learn(self, slot: int, value: Any) -> bool:
        if slot in self.learned:
            return False
        self.learned[slot] = value
        self.cluster.rec(self.pid, "observeDecision", slot=slot, cmd=self.cluster.enc(value))
        self._apply()
        return True

    def _apply(self) -> None:
        app = self.app
        while self.version in self.learned:
            value = self.learned[self.version]
            if self.passive:
                new = app.apply_update(self.app_state, value)
                cmd, res = value.cmd, value.result
            else:
                cmd = value
                res, new = app.next_state(self.app_state, cmd)
            self.cluster.rec(self.pid, "update", cmd=enc_cmd(cmd), result=_plain(res), new=app.encode_state(new))
            self.app_state = new
            self.version += 1
            self.outputs[(cmd.client, cmd.op.id)] = (cmd, res)
            if self.on_apply is not None:
                self.on_apply(cmd, res)

    def propose_update(self, cmd: Command):
        """Primary-side speculative execution on the shadow state."""
        u = self.app.make_update(self.shadow_state, cmd)
        slot = self.shadow_version
        self.cluster.rec(self.pid, "propose", slot=slot, cmd=self.cluster.enc(u))
        self.shadow_state = u.new
        self.shadow_version += 1
        return slot, u

    def reset_shadow(self, version: int, state: Any) -> None:
        self.cluster.rec(self.pid, "resetShadow", version=version, state=self.app.encode_state(state))
        self.shadow_version = version
        self.shadow_state = state

    def reply(self, cmd: Command) -> None:
        got = self.outputs.get((cmd.client, cmd.op.id))
        if got is not None and not self.cluster.sim.is_crashed(cmd.client):
            self.cluster.net.send(self.pid, "REPLY", {"cmd": got[0], "result": got[1]}, [cmd.client], {"op": cmd.op.id})


class Cluster:
    """Base class: wiring, crash schedule, triggers, and the run loop."""

    protocol = "base"

    def __init__(self, cfg: ScenarioConfig):
        if cfg.protocol != self.protocol:
            raise ConfigError("protocol", f"{type(self).__name__} runs {self.protocol}, not {cfg.protocol}")
        self.cfg = cfg
        self.app = make_app(cfg.app, cfg.app_initial)
        self.sim = Simulator(
            cfg.seed,
            scheduling=cfg.scheduling,
            max_defer=cfg.max_defer,
            f=cfg.f,
            respect_threshold=cfg.respect_threshold,
        )
        self.net = Network(
            self.sim,
            delay=tuple(cfg.delay),
            loss=cfg.loss,
            retransmit=cfg.retransmit_after,
            slow={str(k): int(v) for k, v in cfg.slow.items()},
        )
        self.cert_ids = [certifier(i) for i in range(cfg.n)]
        self.replica_ids = [replica(i) for i in range(cfg.replica_count)]
        self.monitor = SafetyMonitor(cfg.n)
        self.sim.listeners.append(self._observe)
        workload = make_workload(cfg, self.app, self.sim.rng)
        self.client_ids = sorted(workload, key=lambda p: int(p.rsplit("/", 1)[1]))
        self.sim.record(
            ENV,
            "config",
            {
                "version": TRACE_VERSION,
                "config": cfg.to_dict(),
                "certifiers": self.cert_ids,
                "replicas": self.replica_ids,
                "clients": self.client_ids,
                "po": cfg.prefix_order,
                "passive": cfg.passive,
                "workload": {c: [enc_cmd(Command(c, op))["op"] for op in ops] for c, ops in workload.items()},
            },
        )
        self.clients = {pid: ClientNode(self, pid, workload[pid]) for pid in self.client_ids}
        for pid, node in self.clients.items():
            self.net.register(pid, node.on_message)
        self.build()
        for pid, node in self.clients.items():
            node.start()
        for pid, t in cfg.crashes:
            self.sim.crash(str(pid), int(t))
        self._triggers = [dict(t) for t in cfg.crash_triggers]

    # -- hooks for subclasses ----------------------------------------------
    def build(self) -> None:
        raise NotImplementedError

    # -- helpers -------------------------------------------------------------
    def rec(self, pid: str, transition: str, **params) -> TraceEvent:
        return self.sim.record(pid, transition, params)

    def enc(self, value: Any) -> Any:
        return enc_payload(value, self.app)

    def enc_prog(self, progress) -> dict:
        return enc_progress(progress, self.app)

    @property
    def majority(self) -> int:
        return self.cfg.n // 2 + 1

    def suspects(self, pid: str) -> bool:
        t = self.sim.crashed_at(pid)
        return t is not None and self.sim.now - t >= self.cfg.lag

    def omega(self) -> str | None:
        """Eventual leader: the lowest-numbered certifier not yet suspected."""
        for c in self.cert_ids:
            if not self.suspects(c):
                return c
        return None

    def request_targets(self, client_pid: str, attempt: int) -> list[str]:
        return self.replica_ids

    def alive(self, pid: str) -> bool:
        return not self.sim.is_crashed(pid)

    def send(self, sender: str, tag: str, payload: dict, to, **info) -> None:
        info = {k: (list(v) if isinstance(v, tuple) else v) for k, v in info.items()}
        self.net.send(sender, tag, payload, to, info)

    # -- crash triggers ------------------------------------------------------
    def _observe(self, ev: TraceEvent) -> None:
        self.monitor.observe(ev)
        if not self.monitor.new_majorities:
            return
        fresh, self.monitor.new_majorities = self.monitor.new_majorities, []
        for slot, rnd, _key in fresh:
            for trig in self._triggers:
                if trig.get("fired") or int(trig.get("slot", 1)) != slot:
                    continue
                trig["fired"] = True
                target = trig.get("target", "sequencer")
                if target == "sequencer":
                    target = self.monitor.sequencer.get(rnd)
                if target is not None:
                    self.sim.schedule(ENV, 0, self._trigger_crash, target, label="trigger")

    def _trigger_crash(self, pid: str) -> None:
        if self.sim.is_crashed(pid):
            return
        try:
            self.sim.crash(pid)
        except ConfigError as exc:
            self.rec(ENV, "note", suppressed=str(exc))

    # -- running ---------------------------------------------------------------
    def done(self) -> bool:
        if not all(node.done or self.sim.is_crashed(pid) for pid, node in self.clients.items()):
            return False
        target = self.cfg.decided_target
        return target is None or len(self.monitor.decided) >= target

    def run(self) -> RunResult:
        self.sim.run(until=self.cfg.max_ticks, stop=self.done)
        completed = self.done()
        violations = list(self.monitor.violations)
        return RunResult(
            self.cfg,
            self.sim.trace,
            violations,
            completed,
            len(self.monitor.decided),
            self.sim.now,
        )
