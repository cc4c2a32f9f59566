"""Scenario construction: topology, agent roster and host from a config mapping.

The default layout mirrors the 20-card testbed: two 12-port switches joined
by a trunk, ten cards on switch ``A`` and ten cards plus the host on switch
``B``.

Config files are YAML::

    seed: 0
    link: {bandwidth_bps: 10e9, latency_s: 1.0e-6, per_frame_overhead_s: auto, loss: 0.0}
    switches: [{id: A, ports: 12}, {id: B, ports: 12}]
    trunks: [[A, B]]
    host: {mac: "02:00:00:00:00:01", switch: B}
    agents:
      generate: {count: 20, switches: [A, B], kernels: [ptrans]}
    # or an explicit list:
    #  - {mac: "02:5a:00:00:01:00", switch: A, vendor_id: 0x1172, product_id: 0x385a}
    retry: {max_retries: 2, ack_timeout: null}
    probe_period_s: 1.0
    faults:
      - {agent: "02:5a:00:00:03:00", loss: 0.01}
      - {agent: "02:5a:00:00:04:00", detach_at_s: 0.5}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from . import kernels as kern
from .agent import Agent
from .fabric import Fabric, LinkParams
from .frames import Discovery, MacAddress
from .host import Host, RetryPolicy

HOST_MAC = MacAddress.parse("02:00:00:00:00:01")
DEFAULT_VENDOR_ID = 0x1172
DEFAULT_PRODUCT_ID = 0x385A
CONFIG_PATH_ENV = "SAF_CONFIG_PATH"


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.line = line


class _LineDict(dict):
    line: Optional[int] = None


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    d = _LineDict(loader.construct_mapping(node, deep=True))
    d.line = node.start_mark.line + 1
    return d


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def agent_mac(i: int) -> MacAddress:
    return MacAddress(bytes([0x02, 0x5A, 0x00, 0x00, i >> 8 & 0xFF, i & 0xFF]))


def agent_identity(i: int, vendor_id: int = DEFAULT_VENDOR_ID, product_id: int = DEFAULT_PRODUCT_ID) -> Discovery:
    m0 = agent_mac(i)
    m1 = MacAddress(m0.octets[:5] + bytes([m0.octets[5] ^ 0x80]))
    return Discovery(m0, m1, vendor_id, product_id)


def make_agent(i: int, kernels=("ptrans",), **kw) -> Agent:
    a = Agent(agent_identity(i), name=f"fpga{i:02d}", **kw)
    for kid, kname in enumerate(kernels):
        a.register_kernel(kern.KERNELS[kname](kid))
    return a


@dataclass
class Scenario:
    fabric: Fabric
    host: Host
    agents: list[Agent]
    placement: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    faults: list = field(default_factory=list)

    def agent(self, mac: MacAddress) -> Agent:
        for a in self.agents:
            if a.mac == mac:
                return a
        raise KeyError(str(mac))

    def apply_faults(self) -> None:
        for f in self.faults:
            agent = self.agent(f["agent"])
            if "loss" in f:
                self.fabric.set_loss(agent, f["loss"])
            if "detach_at_s" in f:
                at = f["detach_at_s"]

                def detach(agent=agent):
                    if self.fabric.is_attached(agent):
                        self.fabric.detach(agent)

                self.fabric.schedule(max(0.0, at - self.fabric.now), detach)


def build_testbed(n_agents: int = 20, *, link: Optional[LinkParams] = None, seed: int = 0,
                   kernels=("ptrans",), retry: Optional[RetryPolicy] = None, trace: bool = False,
                   switch_ports: int = 12, **agent_kw) -> Scenario:
    """Two switches and a trunk; agents fill switch A to ten, the rest go next to the host on B."""
    fabric = Fabric(link, seed=seed, trace=trace)
    fabric.add_switch("A", switch_ports)
    fabric.add_switch("B", switch_ports)
    fabric.add_trunk("A", "B")
    host = Host(HOST_MAC, retry)
    fabric.attach(host, "B", overhead_s=fabric.link_params.per_frame_overhead_s)
    agents = []
    placement = {}
    for i in range(n_agents):
        a = make_agent(i + 1, kernels, **agent_kw)
        sw = "A" if i < 10 or i >= 20 else "B"
        fabric.attach(a, sw)
        placement[a.mac] = sw
        agents.append(a)
    return Scenario(fabric, host, agents, placement)


# -- config files ---------------------------------------------------------------------


def find_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    for d in os.environ.get(CONFIG_PATH_ENV, "").split(os.pathsep):
        if d and (Path(d) / name).exists():
            return Path(d) / name
    raise ConfigError(f"config file {name!r} not found (searched {CONFIG_PATH_ENV} too)")


def load_config(path: str | Path) -> dict:
    path = find_config(str(path))
    text = path.read_text()
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(exc.problem or str(exc), mark.line + 1 if mark else None, str(path)) from None
    if data is None:
        data = _LineDict()
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, str(path))
    data["_source"] = str(path)
    data["_base"] = str(path.parent)
    return data


def _line(obj) -> Optional[int]:
    return getattr(obj, "line", None)


def _mac(value, ctx, src) -> MacAddress:
    try:
        return MacAddress.parse(str(value))
    except ValueError:
        raise ConfigError(f"bad MAC address {value!r}", _line(ctx), src) from None


def _link_params(spec: dict, src) -> LinkParams:
    base = LinkParams()
    if not spec:
        return base
    known = {"bandwidth_bps", "latency_s", "per_frame_overhead_s", "loss"}
    extra = set(spec) - known
    if extra:
        raise ConfigError(f"unknown link keys {sorted(extra)}", _line(spec), src)
    kw = {}
    try:
        if "bandwidth_bps" in spec:
            kw["bandwidth_bps"] = int(float(spec["bandwidth_bps"]))
        if "latency_s" in spec:
            kw["latency_s"] = float(spec["latency_s"])
        ovh = spec.get("per_frame_overhead_s", "auto")
        if ovh != "auto":
            kw["per_frame_overhead_s"] = float(ovh)
        if "loss" in spec:
            kw["loss"] = float(spec["loss"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad link parameter: {exc}", _line(spec), src) from None
    params = LinkParams(**{**base.__dict__, **kw})
    if params.bandwidth_bps <= 0 or params.latency_s < 0 or params.per_frame_overhead_s < 0 or not 0 <= params.loss <= 1:
        raise ConfigError("link parameters out of range", _line(spec), src)
    return params


def build_scenario(cfg: Optional[dict] = None) -> Scenario:
    """Build a simulated scenario from a parsed config (``None`` gives the default testbed)."""
    cfg = cfg or {}
    src = cfg.get("_source")
    link = _link_params(cfg.get("link") or {}, src)
    seed = int(cfg.get("seed", 0))
    retry_spec = cfg.get("retry") or {}
    try:
        retry = RetryPolicy(**{k: v for k, v in retry_spec.items()})
    except TypeError as exc:
        raise ConfigError(f"bad retry section: {exc}", _line(retry_spec), src) from None

    transport = str(cfg.get("transport", "sim"))
    if transport != "sim":
        raise ConfigError(f"transport {transport!r} cannot be simulated; use the raw transport API", None, src)

    if "switches" not in cfg and "agents" not in cfg:
        sc = build_testbed(20, link=link, seed=seed, retry=retry)
        sc.config = cfg
        return sc

    fabric = Fabric(link, seed=seed)
    switches = cfg.get("switches") or [{"id": "A", "ports": 12}, {"id": "B", "ports": 12}]
    for s in switches:
        if not isinstance(s, dict) or "id" not in s:
            raise ConfigError("each switch needs an id", _line(s), src)
        try:
            fabric.add_switch(str(s["id"]), int(s.get("ports", 12)))
        except Exception as exc:
            raise ConfigError(str(exc), _line(s), src) from None
    trunks = cfg.get("trunks", [["A", "B"]] if "switches" not in cfg else [])
    for t in trunks:
        try:
            a, b = t[0], t[1]
            fabric.add_trunk(str(a), str(b))
        except Exception as exc:
            raise ConfigError(f"bad trunk {t!r}: {exc}", _line(cfg.get("trunks")), src) from None

    host_spec = cfg.get("host") or {}
    host = Host(_mac(host_spec.get("mac", str(HOST_MAC)), host_spec, src), retry)
    host_switch = str(host_spec.get("switch", list(fabric.switches)[-1]))
    try:
        fabric.attach(host, host_switch, host_spec.get("port"), overhead_s=link.per_frame_overhead_s)
    except Exception as exc:
        raise ConfigError(f"host: {exc}", _line(host_spec), src) from None

    agents_spec = cfg.get("agents") or []
    entries = []
    if isinstance(agents_spec, dict):
        gen = agents_spec.get("generate")
        if not isinstance(gen, dict):
            raise ConfigError("agents must be a list or {generate: ...}", _line(agents_spec), src)
        count = int(gen.get("count", 0))
        sws = [str(x) for x in gen.get("switches", list(fabric.switches))]
        per = gen.get("per_switch")
        for i in range(count):
            if per:
                sw = sws[min(i // int(per), len(sws) - 1)]
            else:
                sw = sws[i * len(sws) // max(count, 1)]
            entries.append(({"switch": sw, "kernels": gen.get("kernels", ["ptrans"])}, agent_identity(i + 1), gen))
    else:
        for i, spec in enumerate(agents_spec):
            if not isinstance(spec, dict):
                raise ConfigError("agent entries must be mappings", _line(agents_spec), src)
            ident = agent_identity(i + 1)
            m0 = _mac(spec["mac"], spec, src) if "mac" in spec else ident.mac0
            m1 = _mac(spec["mac1"], spec, src) if "mac1" in spec else ident.mac1
            ident = Discovery(m0, m1, int(spec.get("vendor_id", DEFAULT_VENDOR_ID)),
                              int(spec.get("product_id", DEFAULT_PRODUCT_ID)))
            entries.append((spec, ident, spec))

    seen = {host.mac}
    agents, placement = [], {}
    for spec, ident, ctx in entries:
        if ident.mac0 in seen:
            raise ConfigError(f"duplicate MAC {ident.mac0}", _line(ctx), src)
        seen.add(ident.mac0)
        a = Agent(ident, name=spec.get("name") or str(ident.mac0))
        for kid, kname in enumerate(spec.get("kernels", ["ptrans"])):
            if kname not in kern.KERNELS:
                raise ConfigError(f"unknown kernel {kname!r}", _line(ctx), src)
            a.register_kernel(kern.KERNELS[kname](kid))
        sw = str(spec.get("switch", host_switch))
        try:
            fabric.attach(a, sw, spec.get("port"))
        except Exception as exc:
            raise ConfigError(f"agent {ident.mac0}: {type(exc).__name__}: {exc}", _line(ctx), src) from None
        placement[a.mac] = sw
        agents.append(a)

    faults = []
    for f in cfg.get("faults") or []:
        if not isinstance(f, dict) or "agent" not in f:
            raise ConfigError("fault entries need an agent MAC", _line(f), src)
        mac = _mac(f["agent"], f, src)
        if mac not in placement:
            raise ConfigError(f"fault names unknown agent {mac}", _line(f), src)
        entry = {"agent": mac}
        if "loss" in f:
            entry["loss"] = float(f["loss"])
        if "detach_at_s" in f:
            entry["detach_at_s"] = float(f["detach_at_s"])
        faults.append(entry)

    for key in ("bitstream",):
        if key in cfg:
            p = Path(cfg.get("_base", ".")) / str(cfg[key])
            if not p.exists():
                raise ConfigError(f"{key} file {str(p)!r} does not exist", None, src)

    return Scenario(fabric, host, agents, placement, cfg, faults)
