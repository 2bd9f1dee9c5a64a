"""Refinement mappings as a streaming trace checker.

A trace is replayed through a chain of stages.  Each stage holds one
executable abstract spec, maps every incoming step to one of its
transitions (or to a stutter), fires it, and passes the abstract step on to
the next stage.  A transition whose precondition fails, or a projection that
disagrees with the abstract state, rejects the edge with the offending
trace ``seq``.

Chains::

    engine→mc   → mc→active      → active→linearizable
    engine→mcpo → mcpo→passive   → passive→active → active→linearizable

``mc→passive`` applies the passive mapping to plain MultiConsensus.  It
exists to exhibit the counterexample: without prefix order, decided updates
need not chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .app import App, Command, StateUpdate, _freeze, digest, make_app
from .codec import dec_cmd, dec_payload, dec_progress, enc_payload, enc_progress
from .kernel import MalformedTrace, TraceEvent
from .multiconsensus import PI, MultiConsensus
from .specs import ActiveReplication, LinearizableService, PassiveReplication

EDGES = ("engine→mc", "engine→mcpo", "mc→active", "mcpo→passive", "mc→passive", "passive→active",
         "active→linearizable")
CHAINS = {
    "active": ("engine→mc", "mc→active", "active→linearizable"),
    "passive": ("engine→mcpo", "mcpo→passive", "passive→active", "active→linearizable"),
    # state-update payloads without the prefix-order preconditions; expected to fail
    "mc_passive": ("engine→mc", "mc→passive", "passive→active", "active→linearizable"),
}
ASCII = {e.replace("→", "->"): e for e in EDGES}

# concrete events that never change any abstract state
STUTTERS = frozenset({"send", "note", "crash", "timer", "config"})
ENGINE_TRANSITIONS = frozenset(
    {"invoke", "response", "propose", "certifySeq", "certify", "supportRound", "appoint", "recover", "install",
     "observeDecision", "update", "resetShadow"}
)


class Reject(Exception):
    def __init__(self, reason: str, state: Any = None):
        super().__init__(reason)
        self.reason = reason
        self.state = state


@dataclass
class Failure:
    seq: int
    reason: str
    before: Any = None
    after: Any = None

    def to_dict(self) -> dict:
        return {"seq": self.seq, "reason": self.reason, "before": self.before, "after": self.after}


@dataclass
class Verdict:
    edge: str
    accepted: bool
    steps: int = 0
    stutters: int = 0
    failure: Failure | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return {
            "edge": self.edge,
            "accepted": self.accepted,
            "skipped": self.skipped,
            "steps": self.steps,
            "stutters": self.stutters,
            "failure": self.failure.to_dict() if self.failure else None,
        }


# -- standalone derivations ------------------------------------------------------------
def derive_decisions(certified: Iterable[tuple], n: int) -> dict[int, Any]:
    """``decisions[slot] = cmd`` iff, for a single round, more than ``n/2``
    certifiers hold ``(slot, <round, cmd>)``.  Slots without one are absent (⊥).

    Raises ``ValueError`` if two commands qualify for one slot.
    """
    holders: dict[tuple, set] = {}
    for c, slot, pi in certified:
        rnd, cmd = pi
        if cmd is None:
            continue
        holders.setdefault((slot, tuple(rnd), cmd), set()).add(c)
    out: dict[int, Any] = {}
    for (slot, _rnd, cmd), who in holders.items():
        if 2 * len(who) > n:
            if slot in out and out[slot] != cmd:
                raise ValueError(f"slot {slot}: both {out[slot]!r} and {cmd!r} have majorities")
            out[slot] = cmd
    return out


def derive_service_state(replicas: dict[str, tuple[int, Any]], app: App | None = None) -> Any:
    """Application state of the highest-version replica; ``None`` while all are at version 1.

    ``replicas`` maps a name to ``(version, app_state)``.  All replicas at the
    maximal version must agree by digest.
    """
    if not replicas:
        raise ValueError("no replicas")
    top = max(v for v, _ in replicas.values())
    if top == 1:
        return None
    enc = app.encode_state if app is not None else (lambda s: s)
    states = [s for v, s in replicas.values() if v == top]
    digests = {digest(enc(s)) for s in states}
    if len(digests) > 1:
        raise ValueError(f"replicas at version {top} disagree")
    return states[0]


# -- stages ----------------------------------------------------------------------
class Stage:
    edge = "?"

    def __init__(self, ctx: "TraceContext"):
        self.ctx = ctx
        self.steps = 0
        self.stutters = 0
        self.out: list[tuple] = []

    def emit(self, *step) -> None:
        self.out.append(step)

    def feed(self, seq: int, step: tuple) -> list[tuple]:
        self.out = []
        self.handle(seq, step)
        if self.out:
            self.steps += 1
        else:
            self.stutters += 1
        return self.out

    def handle(self, seq: int, step: tuple) -> None:
        raise NotImplementedError

    def summary(self) -> Any:
        return None

    def finish(self) -> None:
        pass


def enc_progress_safe(progress, app):
    try:
        return enc_progress(progress, app)
    except Exception:  # summaries must never mask the real failure
        return repr(progress)


def _need(result, what: str) -> None:
    if not result:
        raise Reject(f"{what}: {getattr(result, 'reason', result)}")


class EngineToMC(Stage):
    """Replays concrete transitions on MultiConsensus; majority-completing certifications emit ``decide``."""

    def __init__(self, ctx, po: bool):
        super().__init__(ctx)
        self.edge = "engine→mcpo" if po else "engine→mc"
        self.mc = MultiConsensus(ctx.certifiers, po=po, app=ctx.app if po else None)

    def summary(self):
        mc = self.mc
        return {
            "certifiers": {
                c: {"round": list(st.cert_bev), "is_seq": st.is_seq, "progress": enc_progress_safe(st.progress, self.ctx.app)}
                for c, st in mc.certs.items()
            },
            "decided": {s: repr(v) for s, v in sorted(mc.decided.items())},
        }

    def _decided(self) -> None:
        for slot, cmd in self.mc.last_decided:
            self.emit("decide", slot, cmd)
        if self.mc.violations:
            raise Reject(f"invariant: {self.mc.violations[0]}")

    def handle(self, seq, step) -> None:
        name, proc, p = step
        mc, ctx = self.mc, self.ctx
        if name in ("invoke", "response", "update", "resetShadow"):
            self.emit(name, proc, p)
            return
        if name == "propose":
            cmd = ctx.payload(p["cmd"])
            _need(mc.propose(proc, p["slot"], cmd), "propose")
            self.emit("propose", proc, p["slot"], cmd)
        elif name in ("certifySeq", "certify"):
            pi = PI(tuple(p["round"]), ctx.payload(p["cmd"]))
            fn = mc.certify_seq if name == "certifySeq" else mc.certify
            _need(fn(proc, p["slot"], pi), name)
            self._decided()
        elif name == "supportRound":
            _need(mc.support_round(proc, tuple(p["round"]), p["coord"]), name)
        elif name == "appoint":
            _need(mc.appoint(proc, tuple(p["round"]), p["sequencer"]), name)
        elif name == "recover":
            rnd = tuple(p["round"])
            _need(mc.recover(proc, rnd, p["sources"]), name)
            claimed = dec_progress(p["progress"], ctx.app)
            if claimed != mc.certs[proc].progress:
                raise Reject(f"recover: engine state {claimed!r} differs from spec {mc.certs[proc].progress!r}")
            self._decided()
        elif name == "install":
            _need(mc.install(proc, tuple(p["round"]), p["coord"]), name)
            self._decided()
        elif name == "observeDecision":
            cmd = ctx.payload(p["cmd"])
            _need(mc.observe_decision(proc, p["slot"], cmd), name)
            self.emit("learn", proc, p["slot"], cmd)
        else:
            raise Reject(f"no mapping for {name}")

    def finish(self) -> None:
        try:
            derived = derive_decisions(self.mc.certified, self.mc.n)
        except ValueError as exc:
            raise Reject(f"derived decisions: {exc}") from None
        if derived != self.mc.decided:
            raise Reject("decisions derived from certified differ from the incrementally tracked ones")


class _ReplicationStage(Stage):
    """Shared client handling for the replication-level stages."""

    spec: ActiveReplication

    def summary(self):
        spec = self.spec
        return {
            "decisions": {s: repr(v) for s, v in sorted(spec.decisions.items())},
            "replicas": {r: {"version": rep.version, "state": repr(rep.app_state)} for r, rep in spec.replicas.items()},
        }

    def _client(self, name, proc, p) -> None:
        op = self.ctx.op(p["op"])
        if name == "invoke":
            _need(self.spec.invoke(proc, op), "invoke")
        else:
            _need(self.spec.response(proc, op, _freeze(p["result"])), "response")
        self.emit(name, proc, op, _freeze(p.get("result")))

    def _learn(self, r, slot, value) -> None:
        _need(self.spec.learn(r, slot), "learn")
        have = self.spec.decisions.get(slot)
        if have != value:
            raise Reject(f"learn: {r} learned {value!r} but slot {slot} holds {have!r}")


class MCToActive(_ReplicationStage):
    edge = "mc→active"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.spec = ActiveReplication(ctx.app, ctx.replicas)

    def handle(self, seq, step) -> None:
        name, a = step[0], step[1:]
        spec, ctx = self.spec, self.ctx
        if name in ("invoke", "response"):
            self._client(name, *a)
        elif name == "propose":
            r, slot, cmd = a
            _need(spec.propose(r, slot, cmd), "propose")
        elif name == "decide":
            slot, cmd = a
            _need(spec.decide(slot, cmd), "decide")
        elif name == "learn":
            self._learn(*a)
        elif name == "update":
            r, p = a
            cmd, res, new = dec_cmd(p["cmd"]), _freeze(p["result"]), ctx.app.decode_state(p["new"])
            _need(spec.update(r, cmd, res, new), "update")
            self.emit("update", r, cmd, res, new)
        else:
            raise Reject(f"{name} has no counterpart in active replication")


class MCPOToPassive(_ReplicationStage):
    edge = "mcpo→passive"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.spec = PassiveReplication(ctx.app, ctx.replicas)

    def handle(self, seq, step) -> None:
        name, a = step[0], step[1:]
        spec, ctx = self.spec, self.ctx
        if name in ("invoke", "response"):
            self._client(name, *a)
        elif name == "propose":
            r, slot, u = a
            if not isinstance(u, StateUpdate):
                raise Reject("passive proposals must be state updates")
            shadow = spec.replica(r).shadow_state
            if digest(ctx.app.encode_state(shadow)) != digest(ctx.app.encode_state(u.old)):
                raise Reject(f"propose: {r} computed on {u.old!r}, shadow is {shadow!r}")
            _need(spec.propose(r, slot, u.cmd, u.result, u.new), "propose")
            self.emit("propose", r, slot, u)
        elif name == "decide":
            slot, u = a
            if not isinstance(u, StateUpdate):
                raise Reject("passive decisions must be state updates")
            _need(spec.decide(slot, u.cmd, u.result, u.new, u.old), "decide")
            self.emit("decide", slot, u)
        elif name == "learn":
            self._learn(*a)
            self.emit("learn", *a)
        elif name == "update":
            r, p = a
            cmd, res, new = dec_cmd(p["cmd"]), _freeze(p["result"]), ctx.app.decode_state(p["new"])
            _need(spec.update(r, cmd, res, new), "update")
            self.emit("update", r, cmd, res, new)
        elif name == "resetShadow":
            r, p = a
            _need(spec.reset_shadow(r, p["version"], ctx.app.decode_state(p["state"])), "resetShadow")
        else:
            raise Reject(f"{name} has no counterpart in passive replication")


class MCToPassive(MCPOToPassive):
    edge = "mc→passive"


class PassiveToActive(_ReplicationStage):
    """State updates map to their commands; resetShadow is a stutter."""

    edge = "passive→active"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.spec = ActiveReplication(ctx.app, ctx.replicas)

    def handle(self, seq, step) -> None:
        name, a = step[0], step[1:]
        spec = self.spec
        if name in ("invoke", "response"):
            proc, op, result = a
            if name == "invoke":
                _need(spec.invoke(proc, op), "invoke")
            else:
                _need(spec.response(proc, op, result), "response")
            self.emit(*step)
        elif name == "propose":
            r, slot, u = a
            _need(spec.propose(r, slot, u.cmd), "propose")
        elif name == "decide":
            slot, u = a
            _need(spec.decide(slot, u.cmd), "decide")
        elif name == "learn":
            r, slot, u = a
            self._learn(r, slot, u.cmd)
        elif name == "update":
            r, cmd, res, new = a
            _need(spec.update(r, cmd, res, new), "update")
            self.emit(*step)
        else:
            raise Reject(f"{name} has no counterpart in active replication")


class ActiveToLinearizable(Stage):
    """The first replica to reach a version executes; later ones stutter.

    After every step the service state must equal the state derived from the
    replicas (the highest-version replica's state).
    """

    edge = "active→linearizable"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.spec = LinearizableService(ctx.app)
        self.replicas = {r: (1, ctx.app.initial) for r in ctx.replicas}
        self.top = 1

    def summary(self):
        return {
            "service_state": repr(self.spec.state),
            "replicas": {r: {"version": v, "state": repr(s)} for r, (v, s) in self.replicas.items()},
        }

    def handle(self, seq, step) -> None:
        name, a = step[0], step[1:]
        spec = self.spec
        if name == "invoke":
            proc, op, _ = a
            _need(spec.invoke(proc, op), "invoke")
        elif name == "response":
            proc, op, result = a
            _need(spec.response(proc, op, result), "response")
        elif name == "update":
            r, cmd, res, new = a
            version, _ = self.replicas.get(r, (1, None))
            self.replicas[r] = (version + 1, new)
            if version + 1 > self.top:
                self.top = version + 1
                _need(spec.execute(cmd.client, cmd.op, res, new), "execute")
                self.emit("execute", cmd, res)
            try:
                derived = derive_service_state(self.replicas, self.ctx.app)
            except ValueError as exc:
                raise Reject(str(exc)) from None
            if derived is not None and derived != spec.state:
                raise Reject(f"service state {spec.state!r} != replica-derived {derived!r}")
            return
        else:
            return
        self.emit(*step)


# -- driver ------------------------------------------------------------------------
@dataclass
class TraceContext:
    app: App
    certifiers: list[str]
    replicas: list[str]
    clients: list[str]
    po: bool
    passive: bool
    raw_config: dict = field(default_factory=dict)

    def payload(self, raw):
        return dec_payload(raw, self.app)

    def op(self, raw):
        return dec_cmd({"c": "", "op": raw}).op

    @classmethod
    def from_events(cls, events: list[TraceEvent]) -> "TraceContext":
        if not events or events[0].transition != "config":
            raise MalformedTrace(1, "first record must be the config event")
        p = events[0].params
        try:
            cfg = p["config"]
            app = make_app(cfg["app"], cfg.get("app_initial"))
            return cls(app, p["certifiers"], p["replicas"], p["clients"], p["po"], p["passive"], cfg)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(1, f"bad config event ({exc})") from None


def default_chain(ctx: TraceContext) -> tuple[str, ...]:
    if ctx.passive:
        return CHAINS["passive"] if ctx.po else CHAINS["mc_passive"]
    return CHAINS["active"]


def parse_chain(text: str) -> tuple[str, ...]:
    """``"engine->mc->active->linearizable"`` or a comma list of edge names."""
    text = text.replace("→", "->")
    if "," in text:
        edges = tuple(ASCII.get(e.strip(), e.strip()) for e in text.split(","))
    else:
        nodes = [t.strip() for t in text.split("->")]
        edges = tuple(ASCII.get(f"{a}->{b}", f"{a}->{b}") for a, b in zip(nodes, nodes[1:]))
    for e in edges:
        if e not in EDGES:
            raise ValueError(f"unknown mapping {e!r}; known: {', '.join(ASCII)}")
    for a, b in zip(edges, edges[1:]):
        if a.split("→")[1] != b.split("→")[0]:
            raise ValueError(f"mappings {a} and {b} do not compose")
    if edges and not edges[0].startswith("engine"):
        raise ValueError("a chain must start from the engine trace")
    return edges


def _make_stage(edge: str, ctx: TraceContext) -> Stage:
    if edge == "engine→mc":
        return EngineToMC(ctx, po=False)
    if edge == "engine→mcpo":
        return EngineToMC(ctx, po=True)
    return {
        "mc→active": MCToActive,
        "mcpo→passive": MCPOToPassive,
        "mc→passive": MCToPassive,
        "passive→active": PassiveToActive,
        "active→linearizable": ActiveToLinearizable,
    }[edge](ctx)


def check_refinement(events: list[TraceEvent], chain: Iterable[str] | None = None) -> list[Verdict]:
    """Replay ``events`` through ``chain``; one verdict per edge.

    Edges after the first rejection are reported as skipped.  Raises
    ``MalformedTrace`` for unknown transition names or unparseable params.
    """
    ctx = TraceContext.from_events(events)
    chain = tuple(chain) if chain is not None else default_chain(ctx)
    stages = [_make_stage(e, ctx) for e in chain]
    failed: int | None = None
    failure: Failure | None = None
    for ev in events[1:]:
        name = ev.transition
        if name in STUTTERS:
            stages[0].stutters += 1
            continue
        if name not in ENGINE_TRANSITIONS:
            raise MalformedTrace(ev.seq + 1, f"unknown transition {name!r}")
        steps = [(name, ev.process, ev.params)]
        for i, stage in enumerate(stages):
            nxt = []
            for step in steps:
                try:
                    nxt.extend(stage.feed(ev.seq, step))
                except Reject as exc:
                    failed, failure = i, Failure(ev.seq, exc.reason, stage.summary(), f"{step[0]} blocked")
                    break
                except (KeyError, TypeError, ValueError, IndexError) as exc:
                    raise MalformedTrace(ev.seq + 1, f"bad params for {name}: {exc!r}") from None
            if failed is not None:
                break
            steps = nxt
        if failed is not None:
            break
    if failed is None:
        for i, stage in enumerate(stages):
            try:
                stage.finish()
            except Reject as exc:
                failed, failure = i, Failure(events[-1].seq, exc.reason, stage.summary(), "end of trace")
                break
    verdicts = []
    for i, stage in enumerate(stages):
        if failed is not None and i > failed:
            verdicts.append(Verdict(stage.edge, False, skipped=True))
        elif failed == i:
            verdicts.append(Verdict(stage.edge, False, stage.steps, stage.stutters, failure))
        else:
            verdicts.append(Verdict(stage.edge, True, stage.steps, stage.stutters))
    return verdicts


def accepted(verdicts: list[Verdict]) -> bool:
    return all(v.accepted for v in verdicts)


# -- violation injection fixtures -------------------------------------------------------
INJECTIONS = ("swap_command", "duplicate_decide", "retract_certification", "skip_po", "skip_install")


def inject_violation(events: list[TraceEvent], kind: str, app: App | None = None) -> list[TraceEvent]:
    """Return a tampered copy of ``events`` that a sound checker must reject.

    * ``swap_command``: a follower certifies a different command than its sequencer.
    * ``duplicate_decide``: a second command is forged to a majority in a decided slot.
    * ``retract_certification``: a certifier certifies in a round it has already left.
    * ``skip_po``: a follower certifies slot 2 before slot 1 (PO traces).
    * ``skip_install``: a follower certifies without installing the round's snapshot (PO traces).
    """
    import copy

    if kind not in INJECTIONS:
        raise ValueError(f"unknown injection {kind!r}")
    ctx = TraceContext.from_events(events)
    app = app or ctx.app
    out = [copy.deepcopy(ev) for ev in events]
    certifies = [i for i, ev in enumerate(out) if ev.transition == "certify"]
    if not certifies:
        raise ValueError("trace has no certify events to tamper with")

    def other_cmd(raw):
        cmd = dec_payload(raw, app)
        if isinstance(cmd, StateUpdate):
            forged = StateUpdate(cmd.old, Command(cmd.cmd.client, cmd.cmd.op._replace(id=cmd.cmd.op.id + "-forged")),
                                 cmd.result, cmd.new)
        else:
            forged = Command(cmd.client, cmd.op._replace(id=cmd.op.id + "-forged"))
        return enc_payload(forged, app)

    if kind == "swap_command":
        out[certifies[0]].params["cmd"] = other_cmd(out[certifies[0]].params["cmd"])
    elif kind == "duplicate_decide":
        first = out[certifies[0]]
        forged = []
        for c in ctx.certifiers:
            forged.append(TraceEvent(0, first.time, c, "certifySeq" if not forged else "certify",
                                     {"slot": first.params["slot"], "round": first.params["round"],
                                      "cmd": other_cmd(first.params["cmd"])}))
        out = out[: certifies[0] + 1] + forged + out[certifies[0] + 1:]
    elif kind == "retract_certification":
        # find a certifier that later supports a higher round, then replay an old certify after it
        for i in certifies:
            ev = out[i]
            for j in range(i + 1, len(out)):
                later = out[j]
                if later.process == ev.process and later.transition == "supportRound" and \
                        tuple(later.params["round"]) > tuple(ev.params["round"]):
                    out.insert(j + 1, copy.deepcopy(ev))
                    break
            else:
                continue
            break
        else:
            raise ValueError("no certifier ever moves to a higher round in this trace")
    elif kind == "skip_po":
        if not ctx.po:
            raise ValueError("skip_po needs a prefix-ordered trace")
        for i in certifies:
            ev = out[i]
            if ev.params["slot"] == 1:
                later = [j for j in certifies if j > i and out[j].process == ev.process and out[j].params["slot"] == 2
                         and out[j].params["round"] == ev.params["round"]]
                if later:
                    j = later[0]
                    moved = out.pop(j)
                    out.insert(i, moved)
                    break
        else:
            raise ValueError("no follower certified slots 1 and 2 in one round")
    elif kind == "skip_install":
        installs = [i for i, ev in enumerate(out) if ev.transition == "install"]
        if not installs:
            raise ValueError("trace has no install events")
        del out[installs[0]]
    for k, ev in enumerate(out):
        ev.seq = k
    return out
