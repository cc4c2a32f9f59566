import textwrap
from pathlib import Path

import pytest

from saf.frames import MacAddress
from saf.scenario import (
    CONFIG_PATH_ENV, ConfigError, HOST_MAC, agent_mac, build_scenario, load_config, build_testbed,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def test_default_testbed_layout():
    sc = build_testbed(20)
    assert len(sc.agents) == 20
    assert sum(1 for s in sc.placement.values() if s == "A") == 10
    assert sc.fabric.location(sc.host)[0] == "B"
    assert len({a.mac for a in sc.agents}) == 20
    assert sc.agents[0].mac == agent_mac(1) == MacAddress.parse("02:5a:00:00:00:01")


def test_empty_config_is_the_default_testbed():
    sc = build_scenario(None)
    assert len(sc.agents) == 20
    assert sc.host.mac == HOST_MAC


@pytest.mark.parametrize("name", ["testbed.yaml", "lossy.yaml"])
def test_shipped_configs_load(name):
    sc = build_scenario(load_config(CONFIGS / name))
    assert len(sc.agents) == 20
    sc.host.discover()
    assert len(sc.host.registry) == 20


def test_lossy_faults_apply():
    sc = build_scenario(load_config(CONFIGS / "lossy.yaml"))
    assert [f["agent"] for f in sc.faults] == [agent_mac(3), agent_mac(7)]
    sc.apply_faults()
    sc.fabric.run_until(0.6)
    assert not sc.fabric.is_attached(sc.agent(agent_mac(7)))
    assert sc.fabric.is_attached(sc.agent(agent_mac(3)))


def test_explicit_agent_list(tmp_path):
    p = write(tmp_path, """\
        switches: [{id: S, ports: 4}]
        host: {switch: S}
        agents:
          - {mac: "02:5a:00:00:10:01", kernels: [identity]}
          - {mac: "02:5a:00:00:10:02", vendor_id: 4466, product_id: 1}
        """)
    sc = build_scenario(load_config(p))
    assert [str(a.mac) for a in sc.agents] == ["02:5a:00:00:10:01", "02:5a:00:00:10:02"]
    sc.host.discover()
    assert sc.host.registry[sc.agents[1].mac].identity.vendor_id == 4466


def test_zero_agents(tmp_path):
    p = write(tmp_path, "switches: [{id: S}]\nagents: []\n")
    sc = build_scenario(load_config(p))
    sc.host.discover()
    assert sc.agents == [] and len(sc.host.registry) == 0


def test_duplicate_mac_reports_line(tmp_path):
    p = write(tmp_path, """\
        switches: [{id: S}]
        agents:
          - {mac: "02:5a:00:00:10:01"}
          - {mac: "02:5a:00:00:10:01"}
        """)
    with pytest.raises(ConfigError) as exc:
        build_scenario(load_config(p))
    assert "duplicate" in str(exc.value)
    assert exc.value.line == 4
    assert str(p) in str(exc.value)


def test_yaml_syntax_error_has_line(tmp_path):
    p = write(tmp_path, "seed: 1\nlink: {bandwidth_bps: 1\nagents: [\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.line is not None


@pytest.mark.parametrize("text,fragment", [
    ("link: {speed: 3}\n", "unknown link keys"),
    ("link: {loss: 2}\n", "out of range"),
    ("link: {latency_s: fast}\n", "bad link parameter"),
    ("retry: {tries: 3}\n", "bad retry"),
    ("transport: raw:eth0\n", "cannot be simulated"),
    ("switches: [{ports: 3}]\n", "needs an id"),
    ("switches: [{id: S}]\nagents: [{kernels: [fft]}]\n", "unknown kernel"),
    ("switches: [{id: S}]\nagents: [{mac: nope}]\n", "bad MAC"),
    ("switches: [{id: S}]\nagents: {count: 3}\n", "generate"),
    ("switches: [{id: S, ports: 1}]\nagents: [{}]\n", "agent"),
    ("switches: [{id: S}]\nagents: []\nfaults: [{agent: '02:00:00:00:99:99'}]\n", "unknown agent"),
    ("switches: [{id: S}]\nagents: []\nbitstream: missing.rbf\n", "does not exist"),
    ("- 1\n- 2\n", "mapping"),
])
def test_config_errors(tmp_path, text, fragment):
    p = write(tmp_path, text)
    with pytest.raises(ConfigError) as exc:
        build_scenario(load_config(p))
    assert fragment in str(exc.value)


def test_search_path(tmp_path, monkeypatch):
    write(tmp_path, "seed: 3\n", "found.yaml")
    monkeypatch.setenv(CONFIG_PATH_ENV, str(tmp_path))
    assert load_config("found.yaml")["seed"] == 3
    with pytest.raises(ConfigError):
        load_config("absent.yaml")


def test_empty_file_is_defaults(tmp_path):
    sc = build_scenario(load_config(write(tmp_path, "")))
    assert len(sc.agents) == 20
