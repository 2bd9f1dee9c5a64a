from __future__ import annotations

import pytest

from smrlab.config import ScenarioConfig, load_config
from smrlab.kernel import ConfigError


@pytest.mark.parametrize("bad,field", [
    (dict(protocol="raft"), "protocol"),
    (dict(n=2, f=1), "n"),
    (dict(m=0), "m"),
    (dict(app="queue"), "app"),
    (dict(delay=[3, 1]), "delay"),
    (dict(delay=[0, 0]), "delay"),
    (dict(loss=1.5), "loss"),
    (dict(dissemination="gossip"), "dissemination"),
    (dict(protocol="zab", dissemination="broadcast_learn"), "dissemination"),
    (dict(trigger="random"), "trigger"),
    (dict(backoff_policy="sleep"), "backoff_policy"),
    (dict(scheduling="lifo"), "scheduling"),
    (dict(dm_size=3), "dm_size"),
    (dict(protocol="vsr", dm_size=4), "dm_size"),
    (dict(protocol="zab", po=False), "po"),
    (dict(crashes=[["certifier/0"]]), "crashes"),
    (dict(crash_triggers=[{"target": "sequencer", "after": "timeout"}]), "crash_triggers"),
    (dict(workload={"client/0": [["inc", None, "x"], ["inc", None, "x"]]}), "workload"),
])
def test_validation_names_the_field(bad, field):
    with pytest.raises(ConfigError) as err:
        ScenarioConfig(**bad)
    assert err.value.field == field


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as err:
        ScenarioConfig.from_dict({"protocol": "paxos", "leader": 1})
    assert err.value.field == "leader"


def test_derived_timers():
    cfg = ScenarioConfig(delay=[1, 3])
    assert (cfg.timeout, cfg.retransmit_after, cfg.client_retry, cfg.lag) == (20, 8, 60, 20)
    tight = ScenarioConfig(delay=[1, 1], progress_timeout=5, detection_lag=2)
    assert (tight.timeout, tight.retransmit_after, tight.client_retry, tight.lag) == (5, 4, 15, 2)
    assert ScenarioConfig(delay=[0, 1]).timeout == 5


def test_protocol_derived_flags():
    assert ScenarioConfig(protocol="vsr").prefix_order and ScenarioConfig(protocol="vsr").replica_count == 3
    assert not ScenarioConfig(protocol="paxos").passive
    assert ScenarioConfig(protocol="mc", po=True).prefix_order
    assert not ScenarioConfig(protocol="mc").prefix_order
    assert ScenarioConfig(protocol="vsr", n=5, f=2).designated_size == 3


def test_yaml_load_and_roundtrip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("protocol: zab\nn: 5\nf: 2\ncrashes:\n  - [certifier/0, 40]\n")
    cfg = load_config(path)
    assert (cfg.protocol, cfg.n, cfg.crashes) == ("zab", 5, [["certifier/0", 40]])
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(seed=9).seed == 9


def test_yaml_top_level_must_be_mapping(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- protocol\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.yaml")):
        if path.stem.startswith(("compare", "bounds")):
            continue
        load_config(path)
