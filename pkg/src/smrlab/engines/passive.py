"""Co-located certifier + replica nodes for the prefix-ordered engines (Zab, VSR).

Commands are state updates computed by the sequencer's replica on its
shadow state.  Followers certify strictly in slot order and only after they
have installed the round's recovered snapshot.
"""
from __future__ import annotations

from ..app import Command
from ..multiconsensus import PI, CertState, Progress
from .base import Cluster, ReplicaCore


class PassiveNode:
    def __init__(self, cluster: Cluster, index: int):
        self.cluster = cluster
        self.index = index
        self.cert = cluster.cert_ids[index]
        self.rep = cluster.replica_ids[index]
        self.st = CertState()
        self.core = ReplicaCore(cluster, self.rep, passive=True, on_apply=self._applied)
        self.pending: dict[Command, None] = {}
        self.buffer: dict[tuple, object] = {}
        self.coord_of: dict[tuple, str] = {}
        self.lead: dict | None = None  # sequencer-side state for the current round
        self.supported_at = 0
        self.attempts = 0

    # -- plumbing ----------------------------------------------------------------
    def start(self) -> None:
        self.cluster.sim.schedule(self.cert, 1, self._tick, label="progress-timer")

    def _tick(self) -> None:
        self.tick()
        period = max(1, self.cluster.cfg.timeout // 2)
        self.cluster.sim.schedule(self.cert, period, self._tick, label="progress-timer")

    def tick(self) -> None:
        raise NotImplementedError

    def on_message(self, msg) -> None:
        handler = getattr(self, "_on_" + msg.tag, None)
        if handler is not None:
            handler(msg.sender, msg.payload)

    def note(self, **params) -> None:
        self.cluster.rec(self.cert, "note", **params)

    @property
    def established(self) -> bool:
        lead = self.lead
        return lead is not None and lead["established"] and self.st.is_seq and lead["round"] == self.st.cert_bev

    def _support(self, rnd: tuple, coord: str) -> None:
        self.cluster.rec(self.cert, "supportRound", round=rnd, coord=coord)
        self.st.cert_bev = rnd
        self.st.is_seq = False
        self.lead = None
        self.coord_of[rnd] = coord
        self.supported_at = self.cluster.sim.now
        self.on_support(rnd, coord)

    def on_support(self, rnd: tuple, coord: str) -> None:
        pass

    # -- replica side -------------------------------------------------------------
    def _on_REQUEST(self, sender, p) -> None:
        cmd = p["cmd"]
        if self.core.knows(cmd):
            self.core.reply(cmd)
            return
        self.pending[cmd] = None
        self.pump()

    def _applied(self, cmd: Command, result) -> None:
        self.pending.pop(cmd, None)
        if self.established:
            self.core.reply(cmd)

    def _on_DECIDE(self, sender, p) -> None:
        self.core.learn(p["slot"], p["cmd"])

    def _on_COMMIT(self, sender, p) -> None:
        for slot, u in p["log"]:
            self.core.learn(slot, u)

    # -- sequencer side -------------------------------------------------------------
    def begin_leading(self, rnd: tuple, recovered: Progress, followers: list[str], quorum: set | None) -> None:
        """Common tail of recovery: reset the shadow, start collecting installs."""
        st = self.st
        st.progress = recovered
        st.is_seq = True
        log = {s: pi.cmd for s, pi in recovered.entries.items()}
        last = log[max(log)].new if log else self.cluster.app.initial
        self.lead = {
            "round": rnd,
            "established": False,
            "acked": {self.cert},
            "quorum": quorum,
            "followers": followers,
            "acks": {},
            "committed": len(log),
            "log": log,
            "cmds": {u.cmd for u in log.values()},
        }
        self.core.reset_shadow(len(log) + 1, last)

    def _install_done(self) -> bool:
        lead = self.lead
        if lead["quorum"] is not None:
            return lead["quorum"] <= lead["acked"]
        return len(lead["acked"]) >= self.cluster.majority

    def _on_ACK(self, sender, p) -> None:
        lead = self.lead
        if lead is None or p["round"] != lead["round"] or lead["established"]:
            return
        lead["acked"].add(sender)
        self._maybe_establish()

    def _maybe_establish(self) -> None:
        lead, cl = self.lead, self.cluster
        if lead["established"] or not self._install_done():
            return
        lead["established"] = True
        self.attempts = 0
        log = sorted(lead["log"].items())
        cl.send(self.cert, "COMMIT", {"round": lead["round"], "log": log}, cl.replica_ids,
                round=lead["round"], upto=len(log))
        self.pump()

    def pump(self) -> None:
        if not self.established:
            return
        st, cl, lead = self.st, self.cluster, self.lead
        rnd = st.cert_bev
        for cmd in list(self.pending):
            if cmd in lead["cmds"]:
                continue
            slot, u = self.core.propose_update(cmd)
            if slot != st.progress.lowest_empty(rnd):
                raise AssertionError(f"{self.cert}: shadow slot {slot} out of step with progress")
            cl.rec(self.cert, "certifySeq", slot=slot, round=rnd, cmd=cl.enc(u))
            st.progress.entries[slot] = PI(rnd, u)
            lead["log"][slot] = u
            lead["cmds"].add(cmd)
            lead["acks"][slot] = {self.cert}
            self.on_sequenced(u)
            cl.send(self.cert, "CERTSEQ", {"slot": slot, "round": rnd, "cmd": u}, lead["followers"],
                    slot=slot, round=rnd)
        self._commit_ready()

    def on_sequenced(self, u) -> None:
        pass

    def _on_CERT(self, sender, p) -> None:
        lead = self.lead
        if lead is None or p["round"] != lead["round"]:
            return
        holders = lead["acks"].get(p["slot"])
        if holders is not None:
            holders.add(sender)
            self._commit_ready()

    def committable(self, holders: set) -> bool:
        return len(holders) >= self.cluster.majority

    def _commit_ready(self) -> None:
        lead = self.lead
        if not self.established:
            return
        while True:
            slot = lead["committed"] + 1
            holders = lead["acks"].get(slot)
            if holders is None or not self.committable(holders):
                return
            lead["committed"] = slot
            self.on_commit(slot, lead["log"][slot])

    def on_commit(self, slot: int, u) -> None:
        cl = self.cluster
        cl.send(self.cert, "DECIDE", {"slot": slot, "cmd": u}, cl.replica_ids, slot=slot, round=self.st.cert_bev)

    # -- follower side -------------------------------------------------------------
    def _on_CERTSEQ(self, sender, p) -> None:
        rnd = p["round"]
        if rnd < self.st.cert_bev:
            self.note(ignored="CERTSEQ", round=rnd, supported=self.st.cert_bev)
            return
        self.buffer[(rnd, p["slot"])] = p["cmd"]
        self.drain()

    def drain(self) -> None:
        st, cl = self.st, self.cluster
        rnd = st.cert_bev
        while st.progress.base_round == rnd and not st.is_seq:
            slot = st.progress.lowest_empty(rnd)
            u = self.buffer.pop((rnd, slot), None)
            if u is None:
                break
            cl.rec(self.cert, "certify", slot=slot, round=rnd, cmd=cl.enc(u))
            st.progress.entries[slot] = PI(rnd, u)
            self.on_certified(u)
            cl.send(self.cert, "CERT", {"slot": slot, "round": rnd}, [self.coord_of[rnd]], slot=slot, round=rnd)
        for key in [k for k in self.buffer if k[0] < rnd]:
            del self.buffer[key]

    def on_certified(self, u) -> None:
        pass

    def install(self, rnd: tuple, coord: str, progress: Progress) -> None:
        self.cluster.rec(self.cert, "install", round=rnd, coord=coord)
        self.st.progress = progress.copy()
        self.coord_of[rnd] = coord


def restamp(progress: Progress, rnd: tuple) -> Progress:
    return Progress(rnd, {s: PI(rnd, pi.cmd) for s, pi in progress.entries.items()})

