"""Zab: Ω-nominated leader, epochs, round-stamps, SYNC and snapshot install.

Recovery, driven by the Ω nominee c:

0. SUPPORT(query) to all; STAMP(epoch) replies carry each supported round.
1. From a majority, c picks epoch max + 1, supports it, sends SUPPORT(new).
2. Supporters reply STAMP(stamp) with their round-stamp (round, slot count).
2.5 If another certifier holds a higher stamp, c sends SYNC to it and gets
   either the missing suffix or, if the rounds differ or the gap exceeds
   ``sync_gap_limit``, the entire snapshot.
3. c recovers, broadcasts SNAPSHOT; followers install and ACK; on a majority
   of ACKs c sends COMMIT with the recovered log and resumes.
"""
from __future__ import annotations

from ..multiconsensus import Progress
from .base import Cluster
from .passive import PassiveNode, restamp


class ZabNode(PassiveNode):
    def __init__(self, cluster, index):
        super().__init__(cluster, index)
        self.election: dict | None = None
        self.attempts = 0

    def tick(self) -> None:
        cl, cfg = self.cluster, self.cluster.cfg
        if cl.omega() != self.cert or self.established:
            return
        busy = self.election is not None or (self.lead is not None and self.st.is_seq)
        started = self.election["started"] if self.election else self.supported_at
        if busy and cl.sim.now - started < 2 * cfg.timeout * min(2 ** self.attempts, 64):
            return
        self.attempts += 1
        self._start_election()

    def on_support(self, rnd, coord) -> None:
        if coord != self.cert:
            self.election = None

    def _start_election(self) -> None:
        cl = self.cluster
        cl.rec(self.cert, "note", election="start")
        self.lead = None
        self.st.is_seq = False
        self.election = {"phase": "epochs", "replies": {self.cert: self.st.cert_bev}, "started": cl.sim.now}
        others = [c for c in cl.cert_ids if c != self.cert]
        cl.send(self.cert, "SUPPORT", {"kind": "query"}, others)
        self._epochs_ready()

    def _on_SUPPORT(self, sender, p) -> None:
        cl, st = self.cluster, self.st
        if p["kind"] == "query":
            cl.send(self.cert, "STAMP", {"kind": "epoch", "round": st.cert_bev}, [sender], round=st.cert_bev)
            return
        rnd = p["round"]
        if rnd <= st.cert_bev:
            self.note(ignored="SUPPORT", round=rnd, supported=st.cert_bev)
            return
        self._support(rnd, sender)
        stamp = st.progress.stamp()
        cl.send(self.cert, "STAMP", {"kind": "stamp", "round": rnd, "stamp": stamp}, [sender], round=rnd)

    def _on_STAMP(self, sender, p) -> None:
        el = self.election
        if el is None:
            return
        if p["kind"] == "epoch" and el["phase"] == "epochs":
            el["replies"][sender] = p["round"]
            self._epochs_ready()
        elif p["kind"] == "stamp" and el["phase"] == "stamps" and p["round"] == el["round"] == self.st.cert_bev:
            el["stamps"][sender] = p["stamp"]
            self._stamps_ready()

    def _epochs_ready(self) -> None:
        el, cl = self.election, self.cluster
        if len(el["replies"]) < cl.majority:
            return
        epoch = max(r[0] for r in el["replies"].values()) + 1
        rnd = (epoch, 0)
        self._support(rnd, self.cert)
        self.election = el
        el.update(phase="stamps", round=rnd, stamps={self.cert: self.st.progress.stamp()})
        others = [c for c in cl.cert_ids if c != self.cert]
        cl.send(self.cert, "SUPPORT", {"kind": "new", "round": rnd}, others, round=rnd)
        self._stamps_ready()

    def _stamps_ready(self) -> None:
        el, cl = self.election, self.cluster
        if len(el["stamps"]) < cl.majority:
            return
        mine = el["stamps"][self.cert]
        best = max(el["stamps"], key=lambda c: (el["stamps"][c], c == self.cert, -cl.cert_ids.index(c)))
        el["sources"] = sorted(el["stamps"])
        if el["stamps"][best] > mine:
            el["phase"] = "sync"
            cl.send(self.cert, "SYNC", {"kind": "request", "round": el["round"], "have": mine}, [best],
                    round=el["round"])
        else:
            self._finish(self.st.progress)

    def _on_SYNC(self, sender, p) -> None:
        cl, st = self.cluster, self.st
        rnd = p["round"]
        if p["kind"] == "request":
            if st.cert_bev != rnd:
                self.note(ignored="SYNC", round=rnd, supported=st.cert_bev)
                return
            (have_round, have_count) = p["have"]
            count = len(st.progress.entries)
            gap = count - have_count
            if st.progress.base_round == tuple(have_round) and 0 <= gap <= cl.cfg.sync_gap_limit:
                missing = [(s, st.progress.entries[s]) for s in range(have_count + 1, count + 1)]
                cl.send(self.cert, "SYNC", {"kind": "diff", "round": rnd, "entries": missing}, [sender],
                        round=rnd, mode="diff", slots=len(missing))
            else:
                cl.send(self.cert, "SYNC", {"kind": "full", "round": rnd, "progress": st.progress.copy()}, [sender],
                        round=rnd, mode="full", slots=count)
            return
        el = self.election
        if el is None or el["phase"] != "sync" or rnd != el["round"] or st.cert_bev != rnd:
            return
        if p["kind"] == "full":
            merged = p["progress"]
        else:
            merged = Progress(st.progress.base_round, st.progress.entries)
            merged.entries.update(dict(p["entries"]))
        self._finish(merged)

    def _finish(self, best: Progress) -> None:
        cl, el = self.cluster, self.election
        rnd = el["round"]
        recovered = restamp(best, rnd)
        cl.rec(self.cert, "recover", round=rnd, sources=el["sources"], progress=cl.enc_prog(recovered))
        self.election = None
        others = [c for c in cl.cert_ids if c != self.cert]
        self.begin_leading(rnd, recovered, others, None)
        cl.send(self.cert, "SNAPSHOT", {"round": rnd, "progress": recovered.copy()}, others, round=rnd)
        self._maybe_establish()

    def _on_SNAPSHOT(self, sender, p) -> None:
        st, cl = self.st, self.cluster
        rnd = p["round"]
        if rnd < st.cert_bev:
            self.note(ignored="SNAPSHOT", round=rnd, supported=st.cert_bev)
            return
        if rnd > st.cert_bev:
            self._support(rnd, sender)
        if st.is_seq:
            return
        if st.progress.base_round < rnd:
            self.install(rnd, sender, p["progress"])
        cl.send(self.cert, "ACK", {"round": rnd}, [sender], round=rnd)
        self.drain()


class ZabCluster(Cluster):
    protocol = "zab"

    def build(self) -> None:
        self.nodes = [ZabNode(self, i) for i in range(self.cfg.n)]
        for node in self.nodes:
            self.sim.colocate(node.cert, node.rep)
            self.net.register(node.cert, node.on_message)
            self.net.register(node.rep, node.on_message)
            node.start()
