"""Multi-Paxos: m replicas propose client commands to n certifiers.

Normal case: a replica sends PROPOSE to the certifiers; the sequencer runs
certifySeq and forwards CERTSEQ; every certifier answers CERT.  In
``collect_then_notify`` mode the CERTs go to the sequencer, which sends
DECIDE to the replicas on a majority.  In ``broadcast_learn`` mode the CERTs
go straight to the replicas, which count them.

Recovery: the prospective sequencer p picks ``(counter + 1, p)``, sends
SUPPORT, collects SNAPSHOT replies from a majority, recovers and re-sends
CERTSEQ for every recovered slot.
"""
from __future__ import annotations

from ..app import Command
from ..kernel import index_of
from ..multiconsensus import PI, CertState, Progress, pi_max
from .base import Cluster, ReplicaCore


class PaxosReplica:
    def __init__(self, cluster: "PaxosCluster", pid: str):
        self.cluster = cluster
        self.pid = pid
        self.core = ReplicaCore(cluster, pid, passive=False, on_apply=self._applied)
        self.pending: dict[Command, None] = {}
        self.mine: dict[int, Command] = {}
        self.slot_of: dict[Command, int] = {}
        self.tally: dict[tuple, set] = {}

    def on_message(self, msg) -> None:
        p = msg.payload
        if msg.tag == "REQUEST":
            cmd = p["cmd"]
            if self.core.knows(cmd):
                self.core.reply(cmd)
            elif cmd not in self.pending:
                self.pending[cmd] = None
                self._propose()
        elif msg.tag == "DECIDE":
            self._learn(p["slot"], p["cmd"])
        elif msg.tag == "CERT":
            holders = self.tally.setdefault((p["slot"], p["round"], p["cmd"]), set())
            holders.add(msg.sender)
            if len(holders) >= self.cluster.majority:
                self._learn(p["slot"], p["cmd"])

    def _learn(self, slot: int, cmd: Command) -> None:
        if not self.core.learn(slot, cmd):
            return
        lost = self.mine.get(slot)
        if lost is not None and lost != cmd:
            self.slot_of.pop(lost, None)
        self._propose()

    def _applied(self, cmd: Command, result) -> None:
        self.pending.pop(cmd, None)
        self.core.reply(cmd)

    def _propose(self) -> None:
        for cmd in list(self.pending):
            if cmd in self.slot_of:
                continue
            slot = 1
            while slot in self.mine or slot in self.core.learned:
                slot += 1
            self.cluster.rec(self.pid, "propose", slot=slot, cmd=self.cluster.enc(cmd))
            self.mine[slot] = cmd
            self.slot_of[cmd] = slot
            self.cluster.send(self.pid, "PROPOSE", {"slot": slot, "cmd": cmd}, self.cluster.cert_ids, slot=slot)


class PaxosCertifier:
    def __init__(self, cluster: "PaxosCluster", pid: str):
        self.cluster = cluster
        self.pid = pid
        self.index = index_of(pid)
        self.st = CertState()
        self.inbox: dict[int, list] = {}
        self.acks: dict[tuple, set] = {}
        self.announced: set[int] = set()
        self.max_counter = 0
        self.recovery: dict | None = None
        self.last_heard = 0
        self.backoff = 0
        self.attempts = 0  # consecutive recoveries without progress, for backoff

    # -- plumbing ------------------------------------------------------------
    def start(self) -> None:
        cfg = self.cluster.cfg
        first = 1 if cfg.trigger == "omega" else cfg.timeout + self.cluster.sim.rng.randint(0, cfg.timeout)
        self.cluster.sim.schedule(self.pid, first, self._tick, label="progress-timer")

    def _tick(self) -> None:
        cfg, cl = self.cluster.cfg, self.cluster
        now = cl.sim.now
        patience = cfg.timeout * min(2 ** self.attempts, 64)
        stale = self.recovery is None or now - self.recovery["started"] >= patience
        if not self.st.is_seq and stale:
            if cfg.trigger == "omega":
                if cl.omega() == self.pid:
                    self._start_recovery()
            elif now - self.last_heard >= patience + self.backoff:
                self.backoff = cl.sim.rng.randint(0, patience)
                self._start_recovery()
        cl.sim.schedule(self.pid, cfg.timeout if cfg.trigger == "timer" else max(1, cfg.timeout // 2), self._tick,
                        label="progress-timer")

    def _support(self, rnd: tuple, coord: str) -> None:
        was_recovering = self.recovery is not None and not self.st.is_seq
        self.cluster.rec(self.pid, "supportRound", round=rnd, coord=coord)
        self.st.cert_bev = rnd
        self.st.is_seq = False
        self.max_counter = max(self.max_counter, rnd[0])
        if coord != self.pid:
            self.recovery = None
            self.last_heard = self.cluster.sim.now
            if was_recovering and self.cluster.cfg.backoff_policy == "retry":
                delay = 1 + self.cluster.sim.rng.randint(0, self.cluster.cfg.timeout // 2)
                self.cluster.sim.schedule(self.pid, delay, self._retry_recovery, rnd, label="retry")

    def _retry_recovery(self, seen: tuple) -> None:
        if not self.st.is_seq and self.st.cert_bev == seen:
            self._start_recovery()

    def _emit_cert(self, slot: int, rnd: tuple, cmd: Command, seq: str) -> None:
        cl = self.cluster
        payload = {"slot": slot, "round": rnd, "cmd": cmd}
        if cl.cfg.dissemination == "broadcast_learn":
            cl.send(self.pid, "CERT", payload, cl.replica_ids, slot=slot, round=rnd)
        else:
            cl.send(self.pid, "CERT", payload, [seq], slot=slot, round=rnd)

    # -- messages ----------------------------------------------------------------
    def on_message(self, msg) -> None:
        handler = getattr(self, "_on_" + msg.tag, None)
        if handler is not None:
            handler(msg.sender, msg.payload)

    def _on_PROPOSE(self, sender, p) -> None:
        box = self.inbox.setdefault(p["slot"], [])
        if p["cmd"] not in box:
            box.append(p["cmd"])
        if self.st.is_seq:
            self._pump()

    def _pump(self) -> None:
        """Sequencer: fill the lowest empty slot from the proposal inbox."""
        st, cl = self.st, self.cluster
        while True:
            slot = st.progress.lowest_empty(st.cert_bev)
            cands = self.inbox.get(slot)
            if not cands:
                return
            cmd = cands[0]
            pi = PI(st.cert_bev, cmd)
            cl.rec(self.pid, "certifySeq", slot=slot, round=st.cert_bev, cmd=cl.enc(cmd))
            st.progress.entries[slot] = pi
            self._broadcast_slot(slot, cmd)

    def _broadcast_slot(self, slot: int, cmd: Command) -> None:
        cl, rnd = self.cluster, self.st.cert_bev
        others = [c for c in cl.cert_ids if c != self.pid]
        cl.send(self.pid, "CERTSEQ", {"slot": slot, "round": rnd, "cmd": cmd}, others, slot=slot, round=rnd)
        self._emit_cert(slot, rnd, cmd, self.pid)

    def _on_CERTSEQ(self, sender, p) -> None:
        st, cl = self.st, self.cluster
        rnd = p["round"]
        if rnd < st.cert_bev:
            cl.rec(self.pid, "note", ignored="CERTSEQ", round=rnd, supported=st.cert_bev)
            return
        if rnd > st.cert_bev:
            self._support(rnd, sender)
            cl.send(self.pid, "SNAPSHOT", {"round": rnd, "progress": st.progress.copy()}, [sender], round=rnd)
        self.last_heard = cl.sim.now
        self.attempts = 0
        slot, pi = p["slot"], PI(rnd, p["cmd"])
        cur = st.progress.get(slot)
        if cur == pi:
            self._emit_cert(slot, rnd, p["cmd"], sender)
            return
        if cur.round == rnd and cur.cmd is not None:
            cl.rec(self.pid, "note", ignored="CERTSEQ", slot=slot, reason="slot already certified")
            return
        cl.rec(self.pid, "certify", slot=slot, round=rnd, cmd=cl.enc(p["cmd"]))
        st.progress.entries[slot] = pi
        self._emit_cert(slot, rnd, p["cmd"], sender)

    def _on_CERT(self, sender, p) -> None:
        st, cl = self.st, self.cluster
        rnd, slot = p["round"], p["slot"]
        if not st.is_seq or rnd != st.cert_bev:
            return
        holders = self.acks.setdefault((slot, rnd, p["cmd"]), set())
        holders.add(sender)
        if len(holders) >= cl.majority and slot not in self.announced:
            self.announced.add(slot)
            cl.send(self.pid, "DECIDE", {"slot": slot, "cmd": p["cmd"]}, cl.replica_ids, slot=slot, round=rnd)

    # -- recovery --------------------------------------------------------------
    def _start_recovery(self) -> None:
        st, cl = self.st, self.cluster
        self.attempts += 1
        counter = max(self.max_counter, st.cert_bev[0]) + 1
        rnd = (counter, self.index)
        self._support(rnd, self.pid)
        self.recovery = {"round": rnd, "snaps": {self.pid: st.progress.copy()}, "started": cl.sim.now}
        others = [c for c in cl.cert_ids if c != self.pid]
        cl.send(self.pid, "SUPPORT", {"round": rnd}, others, round=rnd)
        self._maybe_recover()

    def _on_SUPPORT(self, sender, p) -> None:
        st, cl = self.st, self.cluster
        rnd = p["round"]
        self.max_counter = max(self.max_counter, rnd[0])
        if rnd <= st.cert_bev:
            cl.rec(self.pid, "note", ignored="SUPPORT", round=rnd, supported=st.cert_bev)
            return
        self._support(rnd, sender)
        cl.send(self.pid, "SNAPSHOT", {"round": rnd, "progress": st.progress.copy()}, [sender], round=rnd)

    def _on_SNAPSHOT(self, sender, p) -> None:
        rec = self.recovery
        if rec is None or p["round"] != rec["round"] or self.st.cert_bev != rec["round"] or self.st.is_seq:
            return
        rec["snaps"].setdefault(sender, p["progress"])
        self._maybe_recover()

    def _maybe_recover(self) -> None:
        st, cl, rec = self.st, self.cluster, self.recovery
        if len(rec["snaps"]) < cl.majority:
            return
        rnd = rec["round"]
        progs = list(rec["snaps"].values())
        recovered = Progress(rnd)
        for s in sorted({s for prog in progs for s in prog.entries}):
            best = pi_max(prog.get(s) for prog in progs)
            if best.cmd is not None:
                recovered.entries[s] = PI(rnd, best.cmd)
        cl.rec(self.pid, "recover", round=rnd, sources=sorted(rec["snaps"]), progress=cl.enc_prog(recovered))
        st.progress = recovered
        st.is_seq = True
        self.attempts = 0
        self.acks = {}
        self.announced = set()
        for s, pi in sorted(recovered.entries.items()):
            self._broadcast_slot(s, pi.cmd)
        self._pump()


class PaxosCluster(Cluster):
    protocol = "paxos"

    def request_targets(self, client_pid: str, attempt: int) -> list[str]:
        # first attempt goes to one home replica; retries go everywhere
        if attempt == 0:
            return [self.replica_ids[index_of(client_pid) % len(self.replica_ids)]]
        return self.replica_ids

    def build(self) -> None:
        self.certs = {pid: PaxosCertifier(self, pid) for pid in self.cert_ids}
        self.replicas = {pid: PaxosReplica(self, pid) for pid in self.replica_ids}
        for pid, node in self.certs.items():
            self.net.register(pid, node.on_message)
            node.start()
        for pid, node in self.replicas.items():
            self.net.register(pid, node.on_message)
