"""Message-driven Paxos, VSR and Zab engines plus a MultiConsensus random walk."""
from __future__ import annotations

from ..config import ScenarioConfig
from .base import Cluster, RunResult
from .paxos import PaxosCluster
from .vsr import VsrCluster
from .zab import ZabCluster

CLUSTERS: dict[str, type[Cluster]] = {"paxos": PaxosCluster, "vsr": VsrCluster, "zab": ZabCluster}


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    if cfg.protocol == "mc":
        from .mcwalk import run_walk

        return run_walk(cfg)
    return CLUSTERS[cfg.protocol](cfg).run()


__all__ = ["CLUSTERS", "Cluster", "RunResult", "run_scenario"]
