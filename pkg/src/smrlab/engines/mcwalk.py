"""Seeded random walk directly on MultiConsensus with state-update payloads.

No network: each step picks a move category at random, then fires the
first enabled move of that category in a shuffled candidate list.  Every
certifier transition goes through the executable spec, so the walk only
ever takes steps MultiConsensus allows (with or without the prefix-order
preconditions, per ``po``).  Replicas behave as passive primaries: each
speculatively extends its own shadow state, so competing replicas propose
incompatible update chains.

With ``po`` off, nothing stops a slot-2 update computed on a losing slot-1
branch from being decided; the run records such slots in
``extra["order_anomalies"]`` and replicas install the decided state anyway.
"""
from __future__ import annotations

import random

from ..app import Command, PrefixOrderViolation, digest, make_app
from ..codec import _plain, enc_cmd, enc_payload, enc_progress
from ..kernel import ENV, TraceEvent, certifier, replica
from ..multiconsensus import PI, MultiConsensus, succ
from .base import TRACE_VERSION, RunResult, SafetyMonitor, make_workload

# relative weight of each move category
WEIGHTS = {
    "invoke": 2,
    "propose": 3,
    "support": 1,
    "recover": 2,
    "install": 3,
    "certifySeq": 3,
    "certify": 4,
    "learn": 3,
    "update": 3,
    "reset": 2,
    "response": 2,
}


class _Rep:
    def __init__(self, app):
        self.learned: dict = {}
        self.version = 1
        self.app_state = app.initial
        self.shadow_version = 1
        self.shadow_state = app.initial
        self.chain: dict = {}  # slot -> own proposal since the last reset
        self.applied: set = set()


class McWalk:
    def __init__(self, cfg):
        self.cfg = cfg
        self.app = make_app(cfg.app, cfg.app_initial)
        self.rng = random.Random(cfg.seed)
        self.certs = [certifier(i) for i in range(cfg.n)]
        self.reps = {replica(i): _Rep(self.app) for i in range(cfg.replica_count)}
        self.mc = MultiConsensus(self.certs, po=cfg.prefix_order, app=self.app)
        self.monitor = SafetyMonitor(cfg.n)
        self.trace: list[TraceEvent] = []
        self.step = 0
        self.workload = make_workload(cfg, self.app, self.rng)
        self.next_op = {c: 0 for c in self.workload}
        self.outstanding: dict[str, Command] = {}
        self.answered: set = set()
        self.anomalies: list[int] = []
        self.decide_order: list[int] = []
        self.rec(ENV, "config", {
            "version": TRACE_VERSION,
            "config": cfg.to_dict(),
            "certifiers": self.certs,
            "replicas": sorted(self.reps),
            "clients": sorted(self.workload),
            "po": cfg.prefix_order,
            "passive": True,
            "workload": {c: [enc_cmd(Command(c, op))["op"] for op in ops] for c, ops in self.workload.items()},
        })

    def rec(self, proc, transition, params) -> None:
        ev = TraceEvent(len(self.trace), self.step, proc, transition, params)
        self.trace.append(ev)
        self.monitor.observe(ev)

    def enc(self, v):
        return enc_payload(v, self.app)

    def _decided(self) -> None:
        for slot, u in self.mc.last_decided:
            self.decide_order.append(slot)
            prev = self.mc.decided.get(slot - 1)
            nxt = self.mc.decided.get(slot + 1)
            enc = self.app.encode_state
            if prev is not None and digest(enc(prev.new)) != digest(enc(u.old)):
                self.anomalies.append(slot)
            if nxt is not None and digest(enc(u.new)) != digest(enc(nxt.old)):
                self.anomalies.append(slot + 1)

    # -- candidate moves; each returns True if it fired --------------------------
    def _invoke(self):
        out = []
        for c, ops in sorted(self.workload.items()):
            if c not in self.outstanding and self.next_op[c] < len(ops):
                out.append(lambda c=c, ops=ops: self._do_invoke(c, ops))
        return out

    def _do_invoke(self, c, ops):
        op = ops[self.next_op[c]]
        self.next_op[c] += 1
        self.outstanding[c] = Command(c, op)
        self.rec(c, "invoke", {"op": enc_cmd(self.outstanding[c])["op"]})
        return True

    def _propose(self):
        out = []
        for r, rep in sorted(self.reps.items()):
            if rep.learned.get(rep.shadow_version) is not None:
                continue
            mine = {u.cmd for u in rep.chain.values()}
            for cmd in self.outstanding.values():
                if cmd not in mine and (cmd.client, cmd.op.id) not in rep.applied:
                    out.append(lambda r=r, rep=rep, cmd=cmd: self._do_propose(r, rep, cmd))
        return out

    def _do_propose(self, r, rep, cmd):
        u = self.app.make_update(rep.shadow_state, cmd)
        slot = rep.shadow_version
        self.mc.propose(r, slot, u)
        self.rec(r, "propose", {"slot": slot, "cmd": self.enc(u)})
        rep.chain[slot] = u
        rep.shadow_state, rep.shadow_version = u.new, slot + 1
        return True

    def _support(self):
        out = []
        for i, c in enumerate(self.certs):
            bev = self.mc.certs[c].cert_bev
            for k in range(1, self.cfg.rounds + 1):
                for j, coord in enumerate(self.certs):
                    if (k, j) > bev:
                        out.append(lambda c=c, rnd=(k, j), coord=coord: self._do_support(c, rnd, coord))
        return out

    def _do_support(self, c, rnd, coord):
        if not self.mc.support_round(c, rnd, coord):
            return False
        self.rec(c, "supportRound", {"round": list(rnd), "coord": coord})
        return True

    def _recover(self):
        out = []
        for c in self.certs:
            st = self.mc.certs[c]
            rnd = st.cert_bev
            if st.is_seq or rnd[0] == 0 or self.certs[rnd[1]] != c:
                continue
            srcs = [s for s in self.certs if self.mc.snapshots.get((s, rnd), (None,))[0] == c]
            if 2 * len(srcs) > len(self.certs):
                out.append(lambda c=c, rnd=rnd, srcs=srcs: self._do_recover(c, rnd, srcs))
        return out

    def _do_recover(self, c, rnd, srcs):
        k = self.rng.randint(len(self.certs) // 2 + 1, len(srcs))
        sources = sorted(self.rng.sample(srcs, k))
        if not self.mc.recover(c, rnd, sources):
            return False
        prog = enc_progress(self.mc.certs[c].progress, self.app)
        self.rec(c, "recover", {"round": list(rnd), "sources": sources, "progress": prog})
        self._decided()
        return True

    def _install(self):
        if not self.mc.po:
            return []
        out = []
        for c in self.certs:
            st = self.mc.certs[c]
            rec = self.mc.recovered.get(st.cert_bev)
            if rec is not None and st.progress.base_round < st.cert_bev:
                out.append(lambda c=c, rnd=st.cert_bev, coord=rec[0]: self._do_install(c, rnd, coord))
        return out

    def _do_install(self, c, rnd, coord):
        if not self.mc.install(c, rnd, coord):
            return False
        self.rec(c, "install", {"round": list(rnd), "coord": coord})
        self._decided()
        return True

    def _certify_seq(self):
        out = []
        for c in self.certs:
            st = self.mc.certs[c]
            if not st.is_seq:
                continue
            slot = st.progress.lowest_empty(st.cert_bev)
            for props in self.mc.proposals.values():
                for u in sorted(props.get(slot, ()), key=repr):
                    out.append(lambda c=c, slot=slot, pi=PI(st.cert_bev, u): self._do_cert("certifySeq", c, slot, pi))
        return out

    def _certify(self):
        out = []
        for (slot, pi), holders in self.mc.tally.items():
            for c in self.certs:
                st = self.mc.certs[c]
                if c not in holders and pi.round == st.cert_bev and succ(pi, st.progress.get(slot)):
                    out.append(lambda c=c, slot=slot, pi=pi: self._do_cert("certify", c, slot, pi))
        return out

    def _do_cert(self, name, c, slot, pi):
        fn = self.mc.certify_seq if name == "certifySeq" else self.mc.certify
        if not fn(c, slot, pi):
            return False
        self.rec(c, name, {"slot": slot, "round": list(pi.round), "cmd": self.enc(pi.cmd)})
        self._decided()
        return True

    def _learn(self):
        out = []
        for r, rep in sorted(self.reps.items()):
            for slot, u in sorted(self.mc.decided.items()):
                if slot not in rep.learned:
                    out.append(lambda r=r, rep=rep, slot=slot, u=u: self._do_learn(r, rep, slot, u))
        return out

    def _do_learn(self, r, rep, slot, u):
        if not self.mc.observe_decision(r, slot, u):
            return False
        rep.learned[slot] = u
        self.rec(r, "observeDecision", {"slot": slot, "cmd": self.enc(u)})
        return True

    def _update(self):
        return [lambda r=r, rep=rep: self._do_update(r, rep)
                for r, rep in sorted(self.reps.items()) if rep.version in rep.learned]

    def _do_update(self, r, rep):
        u = rep.learned[rep.version]
        try:
            new = self.app.apply_update(rep.app_state, u)
        except PrefixOrderViolation:
            new = u.new  # passive replicas install the decided state regardless
        rep.app_state = new
        rep.version += 1
        rep.applied.add((u.cmd.client, u.cmd.op.id))
        self.rec(r, "update", {"cmd": enc_cmd(u.cmd), "result": _plain(u.result),
                               "new": self.app.encode_state(new)})
        return True

    def _stale(self, rep) -> bool:
        if rep.shadow_version < rep.version or rep.learned.get(rep.shadow_version) is not None:
            return True
        return any(rep.learned.get(s, u) != u for s, u in rep.chain.items())

    def _reset(self):
        return [lambda r=r, rep=rep: self._do_reset(r, rep)
                for r, rep in sorted(self.reps.items()) if self._stale(rep)]

    def _do_reset(self, r, rep):
        rep.shadow_version, rep.shadow_state = rep.version, rep.app_state
        rep.chain = {}
        self.rec(r, "resetShadow", {"version": rep.version, "state": self.app.encode_state(rep.app_state)})
        return True

    def _response(self):
        out = []
        for c, cmd in sorted(self.outstanding.items()):
            for rep in self.reps.values():
                if (cmd.client, cmd.op.id) in rep.applied:
                    out.append(lambda c=c, cmd=cmd: self._do_response(c, cmd))
                    break
        return out

    def _do_response(self, c, cmd):
        # the result comes from the first decided update carrying this command
        result = next(u.result for _s, u in sorted(self.mc.decided.items()) if u.cmd == cmd)
        del self.outstanding[c]
        self.answered.add((c, cmd.op.id))
        self.rec(c, "response", {"op": enc_cmd(cmd)["op"], "result": _plain(result)})
        return True

    # -- driver -----------------------------------------------------------------------
    def done(self) -> bool:
        return not self.outstanding and all(self.next_op[c] >= len(ops) for c, ops in self.workload.items())

    def run(self) -> RunResult:
        gens = {
            "invoke": self._invoke, "propose": self._propose, "support": self._support,
            "recover": self._recover, "install": self._install, "certifySeq": self._certify_seq,
            "certify": self._certify, "learn": self._learn, "update": self._update,
            "reset": self._reset, "response": self._response,
        }
        rng = self.rng
        while self.step < self.cfg.steps and not self.done():
            self.step += 1
            cats = list(gens)
            fired = False
            while cats and not fired:
                cat = rng.choices(cats, weights=[WEIGHTS[c] for c in cats])[0]
                cats.remove(cat)
                moves = gens[cat]()
                rng.shuffle(moves)
                fired = any(move() for move in moves)
            if not fired:
                break
        violations = list(self.monitor.violations) + self.mc.check_invariants()
        if not self.mc.po:
            violations = [v for v in violations if not v.startswith("PO:")]
        extra = {
            "order_anomalies": sorted(set(self.anomalies)),
            "decide_order": self.decide_order,
            "in_order": self.decide_order == sorted(self.decide_order),
            "steps": self.step,
        }
        return RunResult(self.cfg, self.trace, violations, self.done(), len(self.mc.decided), self.step, extra)


def run_walk(cfg) -> RunResult:
    return McWalk(cfg).run()
