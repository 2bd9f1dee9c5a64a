"""Metrics derived solely from a trace.

``msgs_per_cmd`` counts decision-dissemination messages: CERT plus DECIDE
deliveries attributed to a slot, one per recipient.  That is the n + m
(collect) versus n x m (broadcast) figure.  Only steady-state slots count:
the first and last 10% of decided slots are dropped.  ``latency`` runs from
the certification that completes a majority to the first replica observing
the decision.
"""
from __future__ import annotations

import json
import statistics
from collections import Counter

from .engines.base import SafetyMonitor
from .kernel import TraceEvent

DISSEMINATION_TAGS = ("CERT", "DECIDE")


def steady_slots(slots: list[int], trim: float = 0.1) -> list[int]:
    slots = sorted(slots)
    k = int(len(slots) * trim)
    return slots[k: len(slots) - k] if len(slots) > 2 * k else []


def _dist(values: list[int | float]) -> dict:
    if not values:
        return {"count": 0}
    return {
        "count": len(values),
        "min": min(values),
        "mean": round(statistics.fmean(values), 6),
        "median": statistics.median(values),
        "max": max(values),
    }


def decision_order(monitor: SafetyMonitor) -> tuple[bool, list[int]]:
    """Whether slots were decided in slot order, and the slots whose decided
    state update does not start from the previous slot's decided state."""
    order = sorted(monitor.decided_at, key=lambda s: monitor.decided_at[s][1])
    breaks = []
    for slot in sorted(monitor.decided):
        prev = monitor.decided.get(slot - 1)
        if prev is None:
            continue
        a, b = json.loads(prev), json.loads(monitor.decided[slot])
        if isinstance(a, dict) and "u" in a and isinstance(b, dict) and "u" in b and a["u"][3] != b["u"][0]:
            breaks.append(slot)
    return order == sorted(order), breaks


def compute_metrics(events: list[TraceEvent]) -> dict:
    cfg = events[0].params if events and events[0].transition == "config" else {}
    n = len(cfg.get("certifiers", [])) or 1
    monitor = SafetyMonitor(n)
    per_slot_msgs: Counter = Counter()
    total_msgs = 0
    first_learn: dict[int, int] = {}
    round_start: dict[tuple, int] = {}
    recoveries = []
    invoked: dict[tuple, int] = {}
    response_lat = []
    transitions: Counter = Counter()
    by_tag: Counter = Counter()
    for ev in events:
        transitions[ev.transition] += 1
        monitor.observe(ev)
        p = ev.params
        t = ev.transition
        if t == "send":
            k = len(p["to"])
            total_msgs += k
            by_tag[p["tag"]] += k
            if p["tag"] in DISSEMINATION_TAGS and "slot" in p:
                per_slot_msgs[p["slot"]] += k
        elif t == "observeDecision":
            first_learn.setdefault(p["slot"], ev.time)
        elif t == "supportRound":
            round_start.setdefault(tuple(p["round"]), ev.time)
        elif t == "recover":
            rnd = tuple(p["round"])
            recoveries.append({"round": list(rnd), "by": ev.process, "time": ev.time,
                               "duration": ev.time - round_start.get(rnd, ev.time)})
        elif t == "invoke":
            invoked[(ev.process, p["op"][0])] = ev.time
        elif t == "response":
            start = invoked.get((ev.process, p["op"][0]))
            if start is not None:
                response_lat.append(ev.time - start)
    decided = sorted(monitor.decided)
    steady = steady_slots(decided)
    latency = {s: first_learn[s] - monitor.decided_at[s][0] for s in decided if s in first_learn}
    msgs = [per_slot_msgs[s] for s in steady]
    in_order, breaks = decision_order(monitor)
    return {
        "decided": len(decided),
        "msgs_per_cmd": round(statistics.fmean(msgs), 6) if msgs else None,
        "msgs_per_cmd_slots": len(msgs),
        "total_msgs": total_msgs,
        "total_msgs_per_cmd": round(total_msgs / len(decided), 6) if decided else None,
        "msgs_by_tag": dict(sorted(by_tag.items())),
        "latency": _dist([latency[s] for s in steady if s in latency]),
        "latency_all": _dist(list(latency.values())),
        "response_latency": _dist(response_lat),
        "recoveries": len(recoveries),
        "failovers": max(0, len(recoveries) - 1),  # recoveries after the first round was established
        "recovery_detail": recoveries,
        "view_changes": transitions.get("appoint", 0),
        "decided_in_order": in_order,
        "chain_breaks": breaks,
        "crashes": transitions.get("crash", 0),
        "violations": list(monitor.violations),
        "transitions": dict(sorted(transitions.items())),
        "end_time": events[-1].time if events else 0,
    }
