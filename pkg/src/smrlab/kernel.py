"""Deterministic discrete-event simulation core.

One ``Simulator`` owns virtual time, a seeded ``random.Random`` (Mersenne
Twister, seeded with the integer scenario seed), the pending-event queue,
crash state and the trace.  ``Network`` layers a grow-only message pool on
top of it.  Nothing here reads the wall clock.
"""
from __future__ import annotations

import enum
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class Kind(str, enum.Enum):
    CLIENT = "client"
    REPLICA = "replica"
    CERTIFIER = "certifier"
    ORACLE = "oracle"


@dataclass(frozen=True, order=True)
class ProcessId:
    kind: Kind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}/{self.index}"

    @classmethod
    def parse(cls, text: str) -> "ProcessId":
        kind, _, index = text.partition("/")
        try:
            return cls(Kind(kind), int(index))
        except ValueError:
            raise ValueError(f"bad process id {text!r}") from None


def client(i: int) -> str:
    return f"client/{i}"


def replica(i: int) -> str:
    return f"replica/{i}"


def certifier(i: int) -> str:
    return f"certifier/{i}"


ENV = "oracle/0"


def index_of(pid: str) -> int:
    return int(pid.rsplit("/", 1)[1])


@dataclass
class TraceEvent:
    seq: int
    time: int
    process: str
    transition: str
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "time": self.time,
                "process": self.process,
                "transition": self.transition,
                "params": self.params,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        raw = json.loads(line)
        return cls(raw["seq"], raw["time"], raw["process"], raw["transition"], raw.get("params", {}))


class MalformedTrace(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def write_trace(events: Iterable[TraceEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json())
            fh.write("\n")


def read_trace(path) -> list[TraceEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(TraceEvent.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedTrace(lineno, f"unparseable record ({exc})") from None
    return events


class _Pending:
    __slots__ = ("time", "seq", "pid", "fn", "args", "label", "defer", "cancelled")

    def __init__(self, time, seq, pid, fn, args, label):
        self.time = time
        self.seq = seq
        self.pid = pid
        self.fn = fn
        self.args = args
        self.label = label
        self.defer = 0
        self.cancelled = False

    def __lt__(self, other: "_Pending") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class Simulator:
    """Single-threaded event loop over integer virtual time.

    ``scheduling="fifo"`` fires the lowest ``(time, seq)`` event.  With
    ``"random"`` the seeded RNG picks among the events due at the earliest
    time, and any event passed over more than ``max_defer`` times is forced.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        scheduling: str = "fifo",
        max_defer: int = 64,
        f: int | None = None,
        respect_threshold: bool = True,
    ):
        if scheduling not in ("fifo", "random"):
            raise ConfigError("scheduling", f"unknown policy {scheduling!r}")
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.scheduling = scheduling
        self.max_defer = max_defer
        self.f = f
        self.respect_threshold = respect_threshold
        self.trace: list[TraceEvent] = []
        self.listeners: list[Callable[[TraceEvent], None]] = []
        self.max_forced_defer = 0
        self._queue: list[_Pending] = []
        self._seq = 0
        self._trace_seq = 0
        self._crashed: dict[str, int] = {}
        self._planned_crashes: set[str] = set()
        self._groups: dict[str, tuple[str, ...]] = {}

    # -- processes ---------------------------------------------------------
    def colocate(self, *pids: str) -> None:
        group = tuple(pids)
        for pid in pids:
            self._groups[pid] = group

    def is_crashed(self, pid: str) -> bool:
        return pid in self._crashed

    def crashed_at(self, pid: str) -> int | None:
        return self._crashed.get(pid)

    def crash(self, pid: str, t: int | None = None) -> None:
        """Crash ``pid`` (and anything co-located with it) at time ``t``."""
        t = self.now if t is None else t
        if t < self.now:
            raise ConfigError("crashes", f"crash of {pid} at {t} is in the past (now={self.now})")
        if pid.startswith("certifier/") and self.f is not None and self.respect_threshold:
            doomed = {p for p in self._planned_crashes if p.startswith("certifier/")} | {pid}
            if len(doomed) > self.f:
                raise ConfigError("crashes", f"crashing {pid} exceeds failure threshold f={self.f}")
        self._planned_crashes.add(pid)
        if t == self.now:
            self._do_crash(pid)
        else:
            self._push(t, ENV, self._do_crash, (pid,), "crash")

    def _do_crash(self, pid: str) -> None:
        for p in self._groups.get(pid, (pid,)):
            if p not in self._crashed:
                self._crashed[p] = self.now
                self.record(p, "crash", {})
        for ev in self._queue:
            if ev.pid in self._crashed:
                ev.cancelled = True

    # -- scheduling --------------------------------------------------------
    def _push(self, time: int, pid: str, fn, args, label) -> _Pending:
        ev = _Pending(time, self._seq, pid, fn, args, label)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def schedule(self, pid: str, delay: int | tuple[int, int], fn: Callable, *args, label: str = "") -> int | None:
        """Schedule ``fn(*args)`` on behalf of ``pid``; returns the firing time.

        ``delay`` is either an exact tick count or inclusive ``(lo, hi)``
        bounds drawn uniformly from the simulation RNG.  Events for crashed
        processes are discarded with a trace note and ``None`` is returned.
        """
        if isinstance(delay, tuple):
            lo, hi = delay
            delay = lo if lo == hi else self.rng.randint(lo, hi)
        if delay < 0:
            raise ValueError("negative delay")
        if pid in self._crashed:
            self.record(ENV, "note", {"discarded": label or getattr(fn, "__name__", "?"), "for": pid})
            return None
        ev = self._push(self.now + delay, pid, fn, args, label)
        return ev.time

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def _pop_next(self) -> _Pending | None:
        q = self._queue
        while q and q[0].cancelled:
            heapq.heappop(q)
        if not q:
            return None
        if self.scheduling == "fifo":
            return heapq.heappop(q)
        t = q[0].time
        due = []
        while q and q[0].time == t:
            ev = heapq.heappop(q)
            if not ev.cancelled:
                due.append(ev)
        forced = [ev for ev in due if ev.defer >= self.max_defer]
        chosen = min(forced) if forced else due[self.rng.randrange(len(due))]
        for ev in due:
            if ev is not chosen:
                ev.defer += 1
                heapq.heappush(q, ev)
        self.max_forced_defer = max(self.max_forced_defer, chosen.defer)
        return chosen

    def step(self) -> list[TraceEvent] | None:
        """Execute the next event atomically; ``None`` when nothing is pending."""
        ev = self._pop_next()
        if ev is None:
            return None
        self.now = ev.time
        mark = len(self.trace)
        if ev.pid not in self._crashed:
            ev.fn(*ev.args)
        return self.trace[mark:]

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        while True:
            q = self._queue
            while q and q[0].cancelled:
                heapq.heappop(q)
            if not q:
                return
            if until is not None and q[0].time > until:
                self.now = until
                return
            if stop is not None and stop():
                return
            self.step()

    # -- trace -------------------------------------------------------------
    def record(self, pid: str, transition: str, params: dict | None = None) -> TraceEvent:
        ev = TraceEvent(self._trace_seq, self.now, pid, transition, params or {})
        self._trace_seq += 1
        self.trace.append(ev)
        for listener in self.listeners:
            listener(ev)
        return ev


@dataclass
class Message:
    id: int
    tag: str
    payload: Any
    sender: str
    deliveries: dict[str, str] = field(default_factory=dict)


class Network:
    """Grow-only pool of sent messages with independent per-recipient delivery.

    A lost delivery is retried after ``retransmit`` ticks (plus a fresh
    delay); with ``retransmit=None`` it is never delivered.  Entries are never
    removed from ``pool``.
    """

    def __init__(
        self,
        sim: Simulator,
        delay: tuple[int, int] = (1, 1),
        loss: float = 0.0,
        retransmit: int | None = 4,
        slow: dict[str, int] | None = None,
    ):
        self.sim = sim
        self.delay = tuple(delay)
        self.loss = loss
        self.retransmit = retransmit
        self.slow = slow or {}
        self.pool: list[Message] = []
        self.handlers: dict[str, Callable[[Message], None]] = {}

    def register(self, pid: str, handler: Callable[[Message], None]) -> None:
        self.handlers[pid] = handler

    def _delay_for(self, sender: str, recipient: str) -> int:
        lo, hi = self.delay
        d = lo if lo == hi else self.sim.rng.randint(lo, hi)
        return d + self.slow.get(sender, 0) + self.slow.get(recipient, 0)

    def send(self, sender: str, tag: str, payload: Any, recipients: Iterable[str], info: dict | None = None) -> Message:
        if self.sim.is_crashed(sender):
            raise RuntimeError(f"crashed process {sender} cannot send")
        recipients = list(recipients)
        msg = Message(len(self.pool), tag, payload, sender)
        self.pool.append(msg)
        params = {"tag": tag, "to": recipients, "msg": msg.id}
        if info:
            params.update(info)
        self.sim.record(sender, "send", params)
        for r in recipients:
            msg.deliveries[r] = "pending"
            self._schedule_delivery(msg, r, self._delay_for(sender, r))
        return msg

    def _schedule_delivery(self, msg: Message, recipient: str, delay: int) -> None:
        if self.sim.is_crashed(recipient):
            msg.deliveries[recipient] = "undeliverable"
            return
        self.sim._push(self.sim.now + delay, recipient, self._deliver, (msg, recipient), msg.tag)

    def _deliver(self, msg: Message, recipient: str) -> None:
        if self.loss and self.sim.rng.random() < self.loss:
            msg.deliveries[recipient] = "lost"
            if self.retransmit is not None:
                self._schedule_delivery(msg, recipient, self.retransmit + self._delay_for(msg.sender, recipient))
            return
        msg.deliveries[recipient] = "delivered"
        handler = self.handlers.get(recipient)
        if handler is not None:
            handler(msg)

    def sent(self, tag: str | None = None) -> Iterator[Message]:
        return (m for m in self.pool if tag is None or m.tag == tag)
