"""Seeded random scenario generation for agreement fuzzing."""
from __future__ import annotations

import random

from .config import ScenarioConfig


def fuzz_config(protocol: str, seed: int, *, max_loss: float = 0.2, max_ticks: int = 4000) -> ScenarioConfig:
    """A random scenario within the failure threshold: n in {3, 5}, at most f
    certifier crashes, loss at most ``max_loss``."""
    rng = random.Random(f"{protocol}:{seed}")
    n = rng.choice((3, 5))
    f = (n - 1) // 2
    delay = rng.choice(([1, 1], [1, 3], [1, 5], [2, 4]))
    crashes = []
    victims = rng.sample(range(n), rng.randint(0, f))
    for v in victims:
        crashes.append([f"certifier/{v}", rng.randint(0, 120)])
    raw = {
        "protocol": protocol,
        "n": n,
        "f": f,
        "seed": seed,
        "clients": rng.randint(1, 3),
        "ops_per_client": rng.randint(2, 5),
        "app": rng.choice(("register", "kv")),
        "delay": delay,
        "loss": rng.choice((0.0, 0.05, 0.1, max_loss)),
        "scheduling": rng.choice(("fifo", "random")),
        "crashes": crashes,
        "max_ticks": max_ticks,
    }
    if protocol == "paxos":
        raw["m"] = rng.randint(1, 3)
        raw["dissemination"] = rng.choice(("collect_then_notify", "broadcast_learn"))
        raw["trigger"] = rng.choice(("omega", "omega", "timer"))
        raw["backoff_policy"] = rng.choice(("abort", "retry"))
    if protocol == "vsr" and rng.random() < 0.3:
        raw["dm_size"] = rng.randint(n // 2 + 1, n)
    if rng.random() < 0.25:
        raw["progress_timeout"] = rng.randint(3, 8)
    if not crashes and rng.random() < 0.3:
        raw["crash_triggers"] = [{"target": "sequencer", "after": "majority_certified", "slot": rng.randint(1, 3)}]
    return ScenarioConfig.from_dict(raw)
