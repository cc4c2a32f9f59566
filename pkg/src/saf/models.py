"""Closed-form reconfiguration, setup-cost and on-demand scaling models.

All defaults are the measured or quoted constants of the 20-card Arria-10
testbed. Costs are computed in :class:`decimal.Decimal` so table values
come out to the cent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

CENT = Decimal("0.01")


class Flow(str, Enum):
    ETH = "eth"
    PCIE = "pcie"
    PCIE_DT = "pcie-dt"


class Arch(str, Enum):
    NOCTUA = "noctua"
    ESSPER = "essper"
    SAF = "saf"


@dataclass(frozen=True)
class ReconfigParams:
    t_single_pcie: float = 12.3
    t_single_eth: float = 17.76
    t_net_xfer: float = 15.67
    bitstream_bytes: int = 97_400_000

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class CostParams:
    host_cost: Decimal = Decimal("1099.99")
    fpga_cost: Decimal = Decimal("749.99")

    def __post_init__(self):
        if self.host_cost <= 0 or self.fpga_cost <= 0:
            raise ValueError("unit prices must be positive")


@dataclass(frozen=True)
class EnergyParams:
    p_static_mw: float = 22.0
    p_dynamic_mw: float = 46.0
    p_wait_mw: float = 10.0
    n_base: int = 4
    t_base_h: float = 10.0
    scale_factor: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")


# -- reconfiguration -------------------------------------------------------------


def reconfig_time(flow: Flow | str, n_fpgas: int, params: ReconfigParams = ReconfigParams()) -> float:
    """Seconds to partially reconfigure ``n_fpgas`` cards with one bitstream.

    ETH broadcasts one packet stream to every card, so it is flat in ``n``.
    PCIe pairs two cards per host: the pair is programmed back to back and,
    beyond one host, the bitstream first travels to every host over the
    network, after which the hosts work in parallel. PCIe-DT hangs every
    card off a single host and programs them one after another.
    """
    flow = Flow(flow)
    if n_fpgas < 1:
        raise ValueError("need at least one FPGA")
    if flow is Flow.ETH:
        t = params.t_single_eth
    elif flow is Flow.PCIE:
        t = params.t_single_pcie * min(n_fpgas, 2) + (params.t_net_xfer if n_fpgas > 2 else 0.0)
    else:
        t = params.t_single_pcie * n_fpgas
    return round(t, 10)


def reconfig_speedup(baseline: Flow | str, n_fpgas: int, params: ReconfigParams = ReconfigParams()) -> float:
    """How many times faster ETH is than ``baseline`` at ``n_fpgas`` cards."""
    return reconfig_time(baseline, n_fpgas, params) / reconfig_time(Flow.ETH, n_fpgas, params)


# -- setup cost -------------------------------------------------------------------


def hosts_needed(arch: Arch | str, n_fpgas: int) -> int:
    arch = Arch(arch)
    if n_fpgas < 1:
        raise ValueError("need at least one FPGA")
    if arch is Arch.NOCTUA:
        return n_fpgas
    if arch is Arch.ESSPER:
        return math.ceil(n_fpgas / 2)
    return 1


def setup_cost(arch: Arch | str, n_fpgas: int, params: CostParams = CostParams()) -> dict:
    """Hosts, hardware cost and savings against the cheaper of the two clusters."""
    arch = Arch(arch)
    hosts = hosts_needed(arch, n_fpgas)
    cost = (hosts * params.host_cost + n_fpgas * params.fpga_cost).quantize(CENT)
    best_cluster = min(
        hosts_needed(a, n_fpgas) * params.host_cost + n_fpgas * params.fpga_cost
        for a in (Arch.NOCTUA, Arch.ESSPER)
    )
    savings = ((best_cluster - cost) / best_cluster * 100).quantize(CENT, rounding=ROUND_HALF_UP)
    return {"arch": arch.value, "n_fpgas": n_fpgas, "hosts": hosts, "cost_usd": cost, "pct_savings_vs_best_cluster": savings}


def cost_table(ns=(1, 2, 4, 8, 12, 16, 20), params: CostParams = CostParams()) -> list[dict]:
    rows = []
    for n in ns:
        per = {a: setup_cost(a, n, params) for a in Arch}
        rows.append({
            "fpgas": n,
            "hosts": {a.value: per[a]["hosts"] for a in Arch},
            "cost_usd": {a.value: per[a]["cost_usd"] for a in Arch},
            "pct_savings": per[Arch.SAF]["pct_savings_vs_best_cluster"],
        })
    return rows


# -- on-demand scaling case study ---------------------------------------------------


def case_study(completion_pct: float, params: EnergyParams = EnergyParams()) -> dict:
    """Runtime and FPGA energy when the cluster is doubled ``completion_pct`` into the job.

    The clusters must stop and restart the whole job on the doubled
    hardware, or skip scaling; whichever finishes first is used, with ties
    going to skipping. Hot-plugged cards join a running job instead, and
    until they join they draw a small maintenance power.
    """
    if not 0 <= completion_pct <= 100:
        raise ValueError("completion_pct must be within [0, 100]")
    p = params
    t_base = p.t_base_h
    t = completion_pct / 100 * t_base
    n_scaled = p.n_base * p.scale_factor
    p_fpga = p.p_static_mw + p.p_dynamic_mw

    restart_time = t + t_base / p.scale_factor
    baseline_fpga_h = p.n_base * t_base
    if restart_time < t_base:
        cluster_time = restart_time
        cluster_fpga_h = p.n_base * t + n_scaled * t_base / p.scale_factor
    else:
        cluster_time = t_base
        cluster_fpga_h = baseline_fpga_h

    saf_time = t + (t_base - t) / p.scale_factor
    saf_fpga_h = p.n_base * t + n_scaled * (t_base - t) / p.scale_factor
    # The spare cards only wait if they are eventually added.
    wait_mwh = p.p_wait_mw * t if t < t_base else 0.0

    cluster_mwh = p_fpga * cluster_fpga_h
    saf_mwh = p_fpga * saf_fpga_h + wait_mwh
    to_kj = 3.6e-3
    return {
        "pct": completion_pct,
        "cluster_time_h": cluster_time,
        "cluster_energy_kJ": cluster_mwh * to_kj,
        "saf_time_h": saf_time,
        "saf_energy_kJ": saf_mwh * to_kj,
        "saf_fpga_hours": saf_fpga_h,
        "baseline_fpga_hours": baseline_fpga_h,
        "pct_time_reduction": (cluster_time - saf_time) / cluster_time * 100,
        "pct_energy_reduction": (cluster_mwh - saf_mwh) / cluster_mwh * 100,
    }


def case_study_table(pcts=range(0, 101, 10), params: EnergyParams = EnergyParams()) -> list[dict]:
    return [case_study(pct, params) for pct in pcts]


# -- simulator defaults ---------------------------------------------------------------


@dataclass(frozen=True)
class SimDefaults:
    frames: int
    frame_bytes: int
    per_frame_time_s: float
    serialization_s: float
    per_frame_overhead_s: float
    effective_throughput_Bps: float
    pcie_throughput_Bps: float


def derive_sim_defaults(params: ReconfigParams = ReconfigParams(), chunk_bytes: int = 1024,
                        bandwidth_bps: int = 10_000_000_000) -> SimDefaults:
    """Per-frame host overhead that makes a broadcast PR take ``t_single_eth``.

    The host streams ``ceil(bitstream / chunk)`` frames back to back, so each
    one costs ``t_single_eth / frames``; the frame's own serialization time
    is subtracted to leave the packet-building overhead.
    """
    if chunk_bytes <= 0:
        raise ValueError("chunk_bytes must be positive")
    frames = math.ceil(params.bitstream_bytes / chunk_bytes)
    # ethernet header + pr chunk header + data
    frame_bytes = 14 + 18 + chunk_bytes
    per_frame = params.t_single_eth / frames
    ser = math.ceil(frame_bytes * 8 * 1e9 / bandwidth_bps) / 1e9
    return SimDefaults(
        frames=frames,
        frame_bytes=frame_bytes,
        per_frame_time_s=per_frame,
        serialization_s=ser,
        per_frame_overhead_s=per_frame - ser,
        effective_throughput_Bps=params.bitstream_bytes / params.t_single_eth,
        pcie_throughput_Bps=params.bitstream_bytes / params.t_single_pcie,
    )
