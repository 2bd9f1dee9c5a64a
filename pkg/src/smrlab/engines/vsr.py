"""Viewstamped Replication: rota view managers and designated majorities.

Round ``(k, i)`` is managed by certifier ``(k - 1) mod n``.  The manager v
supports the round and sends SUPPORT; supporters reply STAMP with their
round-stamp.  The first ``dm_size`` responders (v included) become the
round's designated majority, and v appoints the responder p holding the
highest stamp as sequencer (NEWVIEW appoint).  p recovers from its own log,
no backward transfer needed, and sends NEWVIEW with its application state to
everyone; designated members ACK once installed.

Normal case: CERTSEQ goes only to designated members, which certify, update
their speculative state and reply CERT.  p commits a slot once every
designated member has certified it; only then does its replica apply and
answer the client.  Any suspected crash of the sequencer or a designated
member makes the next manager start a view change.
"""
from __future__ import annotations

from ..kernel import index_of
from ..multiconsensus import ROUND0
from .base import Cluster
from .passive import PassiveNode, restamp


class VsrNode(PassiveNode):
    def __init__(self, cluster, index):
        super().__init__(cluster, index)
        self.spec_state = cluster.app.initial
        self.view: dict = {}  # round -> {"seq": pid | None, "dm": list | None}
        self.vc: dict | None = None
        self.max_counter = 0

    # -- rota ----------------------------------------------------------------
    def manager_of(self, k: int) -> str:
        ids = self.cluster.cert_ids
        return ids[(k - 1) % len(ids)]

    def unhappy(self) -> bool:
        cl, st = self.cluster, self.st
        if st.cert_bev == ROUND0:
            return True
        view = self.view.get(st.cert_bev, {})
        seq, dm = view.get("seq"), view.get("dm")
        if seq is not None and cl.suspects(seq):
            return True
        if dm is not None:
            if any(cl.suspects(d) for d in dm):
                return True
            if view.get("installed") or st.is_seq:
                return False
        if cl.suspects(self.coord_of.get(st.cert_bev, self.cert)):
            return True
        return cl.sim.now - self.supported_at > 3 * cl.cfg.timeout * min(2 ** self.attempts, 64)

    def tick(self) -> None:
        cl = self.cluster
        vc = self.vc
        if vc is not None and not vc["done"] and cl.sim.now - vc["started"] >= cl.cfg.timeout:
            self._stamps_ready(force=True)
        if not self.unhappy():
            return
        k = max(self.st.cert_bev[0], self.max_counter) + 1
        while cl.suspects(self.manager_of(k)):
            k += 1
        if self.manager_of(k) != self.cert:
            return
        vc = self.vc
        if vc is not None and vc["round"][0] >= k and cl.sim.now - vc["started"] < 3 * cl.cfg.timeout:
            return
        self.attempts += 1
        self._start_view_change(k)

    def on_support(self, rnd, coord) -> None:
        self.max_counter = max(self.max_counter, rnd[0])
        self.view.setdefault(rnd, {"seq": None, "dm": None})
        if coord != self.cert:
            self.vc = None

    # -- manager -------------------------------------------------------------
    def _start_view_change(self, k: int) -> None:
        cl = self.cluster
        rnd = (k, self.index)
        self._support(rnd, self.cert)
        self.vc = {"round": rnd, "stamps": {self.cert: self.st.progress.stamp()}, "started": cl.sim.now, "done": False}
        others = [c for c in cl.cert_ids if c != self.cert]
        cl.send(self.cert, "SUPPORT", {"round": rnd}, others, round=rnd)
        self._stamps_ready()

    def _on_SUPPORT(self, sender, p) -> None:
        cl, st = self.cluster, self.st
        rnd = p["round"]
        if rnd <= st.cert_bev:
            self.note(ignored="SUPPORT", round=rnd, supported=st.cert_bev)
            cl.send(self.cert, "STAMP", {"kind": "stale", "round": st.cert_bev}, [sender], round=st.cert_bev)
            return
        self._support(rnd, sender)
        cl.send(self.cert, "STAMP", {"kind": "stamp", "round": rnd, "stamp": st.progress.stamp()}, [sender],
                round=rnd)

    def _on_STAMP(self, sender, p) -> None:
        vc = self.vc
        if p["kind"] == "stale":
            self.max_counter = max(self.max_counter, p["round"][0])
            return
        if vc is None or vc["done"] or p["round"] != vc["round"] or self.st.cert_bev != vc["round"]:
            return
        vc["stamps"][sender] = p["stamp"]
        self._stamps_ready()

    def _stamps_ready(self, force: bool = False) -> None:
        """Fix the designated majority once ``dm_size`` certifiers answered, or
        any majority after a progress timeout."""
        vc, cl = self.vc, self.cluster
        if len(vc["stamps"]) < cl.cfg.designated_size and not (force and len(vc["stamps"]) >= cl.majority):
            return
        vc["done"] = True
        rnd = vc["round"]
        stamps = vc["stamps"]
        dm = sorted(stamps, key=index_of)
        seq = max(dm, key=lambda c: (stamps[c], c == self.cert, -index_of(c)))
        cl.rec(self.cert, "appoint", round=rnd, sequencer=seq)
        self.view[rnd]["seq"] = seq
        cl.send(self.cert, "NEWVIEW", {"kind": "appoint", "round": rnd, "dm": dm}, [seq], round=rnd)

    # -- appointed sequencer -----------------------------------------------------
    def _on_NEWVIEW(self, sender, p) -> None:
        if p["kind"] == "appoint":
            self._appointed(sender, p)
        else:
            self._new_state(sender, p)

    def _appointed(self, manager: str, p) -> None:
        cl, st = self.cluster, self.st
        rnd, dm = p["round"], p["dm"]
        if st.cert_bev != rnd or st.is_seq:
            self.note(ignored="NEWVIEW", round=rnd, supported=st.cert_bev)
            return
        recovered = restamp(st.progress, rnd)
        cl.rec(self.cert, "recover", round=rnd, sources=dm, progress=cl.enc_prog(recovered))
        self.view[rnd] = {"seq": self.cert, "dm": dm}
        log = recovered.entries
        self.spec_state = log[max(log)].cmd.new if log else cl.app.initial
        followers = [c for c in dm if c != self.cert]
        self.begin_leading(rnd, recovered, followers, set(dm))
        others = [c for c in cl.cert_ids if c != self.cert]
        payload = {
            "kind": "state",
            "round": rnd,
            "manager": manager,
            "dm": dm,
            "state": self.spec_state,
            "progress": recovered.copy(),
        }
        cl.send(self.cert, "NEWVIEW", payload, others, round=rnd, kind="state")
        self._maybe_establish()

    def _new_state(self, sender, p) -> None:
        st, cl = self.st, self.cluster
        rnd = p["round"]
        if rnd < st.cert_bev:
            self.note(ignored="NEWVIEW", round=rnd, supported=st.cert_bev)
            return
        if rnd > st.cert_bev:
            self._support(rnd, p["manager"])
        if st.is_seq:
            return
        view = self.view.setdefault(rnd, {})
        view.update(seq=sender, dm=p["dm"], installed=True)
        if st.progress.base_round < rnd:
            self.install(rnd, sender, p["progress"])
            self.spec_state = p["state"]
        if self.cert in p["dm"]:
            cl.send(self.cert, "ACK", {"round": rnd}, [sender], round=rnd)
        self.drain()

    # -- speculative execution -----------------------------------------------
    def on_sequenced(self, u) -> None:
        self.spec_state = u.new

    def on_certified(self, u) -> None:
        self.spec_state = self.cluster.app.apply_update(self.spec_state, u)

    def committable(self, holders: set) -> bool:
        return self.lead["quorum"] <= holders

    def on_commit(self, slot: int, u) -> None:
        cl = self.cluster
        self.core.learn(slot, u)
        others = [r for r in cl.replica_ids if r != self.rep]
        cl.send(self.cert, "DECIDE", {"slot": slot, "cmd": u}, others, slot=slot, round=self.st.cert_bev)


class VsrCluster(Cluster):
    protocol = "vsr"

    def build(self) -> None:
        self.nodes = [VsrNode(self, i) for i in range(self.cfg.n)]
        for node in self.nodes:
            self.sim.colocate(node.cert, node.rep)
            self.net.register(node.cert, node.on_message)
            self.net.register(node.rep, node.on_message)
            node.start()
