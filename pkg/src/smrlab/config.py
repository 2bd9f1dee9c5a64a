"""Scenario configuration.

Configs are flat YAML mappings.  Unknown keys are rejected.  Timers default
from the mean one-way delay: progress timeout 10x, link retransmission 4x,
client retry 3x the progress timeout, failure-detection lag 1x.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import yaml

from .kernel import ConfigError

PROTOCOLS = ("paxos", "vsr", "zab", "mc")
DISSEMINATION = ("collect_then_notify", "broadcast_learn")


@dataclass
class ScenarioConfig:
    protocol: str = "paxos"
    n: int = 3
    f: int = 1
    m: int = 2
    app: str = "register"
    app_initial: Any = None
    clients: int = 2
    ops_per_client: int = 5
    workload: dict | None = None
    seed: int = 0
    delay: list = field(default_factory=lambda: [1, 3])
    loss: float = 0.0
    retransmit: int | None = None
    slow: dict = field(default_factory=dict)
    scheduling: str = "fifo"
    max_defer: int = 64
    crashes: list = field(default_factory=list)
    crash_triggers: list = field(default_factory=list)
    respect_threshold: bool = True
    progress_timeout: int | None = None
    client_timeout: int | None = None
    detection_lag: int | None = None
    dissemination: str = "collect_then_notify"
    dm_size: int | None = None
    trigger: str = "omega"
    backoff_policy: str = "abort"
    sync_gap_limit: int = 16
    po: bool | None = None
    steps: int = 300
    rounds: int = 3
    max_ticks: int = 3000
    decided_target: int | None = None

    def __post_init__(self):
        self.validate()

    # -- derived values ----------------------------------------------------------
    @property
    def mean_delay(self) -> float:
        return (self.delay[0] + self.delay[1]) / 2

    @property
    def timeout(self) -> int:
        if self.progress_timeout is not None:
            return self.progress_timeout
        return max(2, math.ceil(10 * self.mean_delay))

    @property
    def retransmit_after(self) -> int:
        return self.retransmit if self.retransmit is not None else max(1, math.ceil(4 * self.mean_delay))

    @property
    def client_retry(self) -> int:
        return self.client_timeout if self.client_timeout is not None else 3 * self.timeout

    @property
    def lag(self) -> int:
        return self.detection_lag if self.detection_lag is not None else self.timeout

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    @property
    def designated_size(self) -> int:
        return self.dm_size if self.dm_size is not None else self.majority

    @property
    def passive(self) -> bool:
        if self.protocol == "mc":
            return True
        return self.protocol in ("vsr", "zab")

    @property
    def prefix_order(self) -> bool:
        if self.protocol == "mc":
            return bool(self.po)
        return self.protocol in ("vsr", "zab")

    @property
    def replica_count(self) -> int:
        return self.n if self.protocol in ("vsr", "zab") else self.m

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError("protocol", f"must be one of {PROTOCOLS}")
        if self.f < 0 or self.n < 2 * self.f + 1:
            raise ConfigError("n", f"need n >= 2f+1 (n={self.n}, f={self.f})")
        if self.m < 1:
            raise ConfigError("m", "need at least one replica")
        if self.app not in ("register", "kv"):
            raise ConfigError("app", f"unknown app {self.app!r}")
        if len(self.delay) != 2 or not 0 <= self.delay[0] <= self.delay[1]:
            raise ConfigError("delay", "expected [lo, hi] with 0 <= lo <= hi")
        if self.delay[1] < 1:
            raise ConfigError("delay", "upper bound must be at least one tick")
        if not 0.0 <= self.loss <= 1.0:
            raise ConfigError("loss", "must be a probability")
        if self.dissemination not in DISSEMINATION:
            raise ConfigError("dissemination", f"must be one of {DISSEMINATION}")
        if self.dissemination == "broadcast_learn" and self.protocol != "paxos":
            raise ConfigError("dissemination", "broadcast_learn is only implemented for paxos")
        if self.trigger not in ("omega", "timer"):
            raise ConfigError("trigger", "must be omega or timer")
        if self.backoff_policy not in ("abort", "retry"):
            raise ConfigError("backoff_policy", "must be abort or retry")
        if self.scheduling not in ("fifo", "random"):
            raise ConfigError("scheduling", "must be fifo or random")
        if self.dm_size is not None:
            if self.protocol != "vsr":
                raise ConfigError("dm_size", "designated majorities exist only in vsr")
            if not self.majority <= self.dm_size <= self.n:
                raise ConfigError("dm_size", f"must lie in [{self.majority}, {self.n}]")
        if self.po is not None and self.protocol != "mc" and bool(self.po) != self.prefix_order:
            raise ConfigError("po", f"{self.protocol} has po={self.prefix_order} built in")
        for entry in self.crashes:
            if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
                raise ConfigError("crashes", f"expected [process, time], got {entry!r}")
        for trig in self.crash_triggers:
            if not isinstance(trig, dict) or set(trig) - {"target", "after", "slot"}:
                raise ConfigError("crash_triggers", f"bad trigger {trig!r}")
            if trig.get("after", "majority_certified") != "majority_certified":
                raise ConfigError("crash_triggers", "only after=majority_certified is supported")
        if self.workload is not None:
            seen = set()
            for cl, ops in self.workload.items():
                for k, op in enumerate(ops):
                    op_id = op[2] if len(op) > 2 else f"c{cl}-{k}"
                    if (cl, op_id) in seen:
                        raise ConfigError("workload", f"duplicate op id {op_id} for client {cl}")
                    seen.add((cl, op_id))

    # -- (de)serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    def replace(self, **changes) -> "ScenarioConfig":
        raw = self.to_dict()
        raw.update(changes)
        return ScenarioConfig.from_dict(raw)


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    return ScenarioConfig.from_dict(raw)
