"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 some devices failed,
3 every device failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from decimal import Decimal
from pathlib import Path

from . import __version__
from . import models
from .frames import MacAddress
from .host import ALL, HostError, HostTimeout
from .ptrans import IndivisiblePartition, sweep
from .scenario import ConfigError, build_scenario, load_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_TOTAL = 3

STRONG_SWEEP = (1, 2, 4, 8, 16, 20)
WEAK_SWEEP = (1, 2, 4, 8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _jsonable(obj):
    if isinstance(obj, Decimal):
        return float(obj)
    if isinstance(obj, MacAddress):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def emit_json(command: str, result, ok: bool = True) -> None:
    print(json.dumps({"command": command, "ok": ok, "result": result}, default=_jsonable, indent=2))


def print_table(headers, rows) -> None:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    for j, r in enumerate(cells):
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if j == 0:
            print("  ".join("-" * w for w in widths))


def _scenario(args):
    cfg = load_config(args.config) if args.config else None
    if cfg is not None and args.seed is not None:
        cfg["seed"] = args.seed
    if cfg is None and args.seed is not None:
        cfg = {"seed": args.seed}
    sc = build_scenario(cfg)
    sc.apply_faults()
    return sc


# -- device commands ------------------------------------------------------------------


def cmd_discover(args) -> int:
    sc = _scenario(args)
    host = sc.host
    host.probe_loop(args.period)
    sc.fabric.run_until(args.settle)
    host.stop_probing()
    sc.fabric.run_until()
    rows = host.registry.snapshot()
    if args.json:
        emit_json("discover", {"devices": rows, "fabric": sc.fabric.snapshot().to_dict()})
    else:
        print_table(["mac", "vendor", "product", "state"],
                    [(r["mac"], r["vendor_id"], r["product_id"], r["state"]) for r in rows])
        print(f"{len(rows)} device(s)")
    return EXIT_OK


def _parse_targets(text: str):
    if text == "all":
        return ALL
    try:
        return [MacAddress.parse(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise UsageError(f"bad --targets: {exc}") from None


def cmd_program(args) -> int:
    path = Path(args.rbf)
    if not path.is_file():
        raise UsageError(f"bitstream file not found: {path}")
    bitstream = path.read_bytes()
    if not bitstream:
        raise UsageError(f"bitstream file is empty: {path}")
    targets = _parse_targets(args.targets)
    sc = _scenario(args)
    host = sc.host
    host.discover()
    wanted = sorted(host.registry.macs(), key=lambda m: m.octets) if targets is ALL else list(targets)
    unknown = [m for m in wanted if m not in host.registry]
    if unknown:
        raise UsageError(f"not discovered: {', '.join(map(str, unknown))}")
    acks = host.program(targets, bitstream)
    expected = hashlib.sha256(bitstream).hexdigest()
    rows = []
    for m in wanted:
        ack = acks.get(m)
        rows.append({
            "mac": str(m),
            "status": "ok" if ack else host.failures.get(m, "failed"),
            "digest": ack.digest.hex() if ack else None,
            "state": host.registry[m].state.value,
        })
    n_ok = sum(r["status"] == "ok" for r in rows)
    code = EXIT_OK if n_ok == len(rows) else (EXIT_TOTAL if n_ok == 0 else EXIT_PARTIAL)
    if args.json:
        emit_json("program", {
            "file": str(path), "bytes": len(bitstream), "sha256": expected,
            "sim_time_s": host.phase_times.get("program"), "devices": rows,
        }, ok=code == EXIT_OK)
    else:
        print_table(["mac", "status", "digest", "state"],
                    [(r["mac"], r["status"], (r["digest"] or "-")[:16], r["state"]) for r in rows])
        print(f"{n_ok}/{len(rows)} programmed in {host.phase_times.get('program', 0.0):.4f} s simulated; sha256 {expected[:16]}")
    return code


def cmd_bench_ptrans(args) -> int:
    if args.devices:
        try:
            ks = tuple(int(x) for x in args.devices.split(","))
        except ValueError:
            raise UsageError("--devices takes a comma separated list of counts") from None
    elif args.sweep:
        ks = STRONG_SWEEP if args.scaling == "strong" else WEAK_SWEEP
    else:
        ks = (1,)
    if any(k < 1 for k in ks):
        raise UsageError("device counts must be positive")
    # the standard sweeps contain counts that rarely divide n, so they always pad
    pad = args.pad or (args.sweep and not args.devices)
    results = sweep(ks, args.n, args.scaling, seed=args.seed or 0, pad=pad)
    rows = [r.to_dict() for r in results]
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "n", "scaling", "elements_per_device", "transfer_s", "run_s", "speedup", "correct"])
            for r in results:
                w.writerow([r.k, r.n, r.scaling, r.elements_per_device, r.times["transfer"], r.times["run"],
                            r.speedup, r.correct])
    ok = all(r.correct for r in results)
    if args.json:
        emit_json("bench-ptrans", {"runs": rows}, ok=ok)
    else:
        label = "speedup" if args.scaling == "strong" else "scaled speedup"
        print_table(["k", "n", "elems/dev", "transfer s", "run s", label, "correct"],
                    [(r.k, r.n, r.elements_per_device, f"{r.times['transfer']:.6f}", f"{r.times['run']:.6f}",
                      f"{r.speedup:.3f}", r.correct) for r in results])
    return EXIT_OK if ok else EXIT_TOTAL


# -- models ------------------------------------------------------------------------------


def _reconfig_rows(ns, flows):
    return [{"flow": f.value, "n": n, "time_s": models.reconfig_time(f, n),
             "eth_speedup": models.reconfig_speedup(f, n)} for n in ns for f in flows]


def cmd_model(args) -> int:
    kind = args.kind
    if kind == "reconfig":
        flows = [models.Flow(args.flow)] if args.flow else list(models.Flow)
        ns = [args.n] if args.n and not args.table else [1, 2, 4, 8, 12, 16, 20]
        rows = _reconfig_rows(ns, flows)
        if args.json:
            emit_json("model reconfig", rows)
        else:
            print_table(["flow", "fpgas", "time s", "ETH speedup"],
                        [(r["flow"], r["n"], f"{r['time_s']:.2f}", f"{r['eth_speedup']:.2f}x") for r in rows])
    elif kind == "cost":
        ns = [args.n] if args.n and not args.table else [1, 2, 4, 8, 12, 16, 20]
        rows = models.cost_table(ns)
        if args.json:
            emit_json("model cost", rows)
        else:
            print_cost_table(rows)
    else:
        if args.pct is not None and not args.table:
            pcts = [args.pct]
        else:
            pcts = list(range(0, 101, 10))
        rows = models.case_study_table(pcts)
        if args.json:
            emit_json("model case-study", rows)
        else:
            print_case_table(rows)
    return EXIT_OK


def print_cost_table(rows) -> None:
    print_table(
        ["FPGAs", "Noctua hosts", "ESSPER hosts", "SAF hosts", "Noctua $", "ESSPER $", "SAF $", "savings %"],
        [(r["fpgas"], r["hosts"]["noctua"], r["hosts"]["essper"], r["hosts"]["saf"],
          f"{r['cost_usd']['noctua']:,}", f"{r['cost_usd']['essper']:,}", f"{r['cost_usd']['saf']:,}",
          f"{r['pct_savings']}") for r in rows],
    )
    if any(r["fpgas"] == 20 for r in rows):
        print("note: the published table lists 20 ESSPER hosts at 20 FPGAs; its cost implies 10, used here")


def print_case_table(rows) -> None:
    print_table(
        ["done %", "cluster h", "cluster kJ", "SAF h", "SAF kJ", "time red %", "energy red %"],
        [(f"{r['pct']:g}", f"{r['cluster_time_h']:g}", f"{r['cluster_energy_kJ']:.2f}", f"{r['saf_time_h']:g}",
          f"{r['saf_energy_kJ']:.2f}", f"{r['pct_time_reduction']:.2f}", f"{r['pct_energy_reduction']:.2f}")
         for r in rows],
    )


def cmd_tables(args) -> int:
    recon = _reconfig_rows([1, 2, 4, 8, 12, 16, 20], list(models.Flow))
    cost = models.cost_table()
    case = models.case_study_table()
    if args.json:
        emit_json("tables", {"reconfig": recon, "cost": cost, "case_study": case})
        return EXIT_OK
    print("Reconfiguration time (s)")
    print_table(["FPGAs"] + [f.value for f in models.Flow],
                [(n, *(f"{models.reconfig_time(f, n):.2f}" for f in models.Flow)) for n in (1, 2, 4, 8, 12, 16, 20)])
    print("\nSetup cost")
    print_cost_table(cost)
    print("\nOn-demand scaling case study")
    print_case_table(case)
    return EXIT_OK


# -- wiring -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario YAML file (searched in $SAF_CONFIG_PATH too)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="saf", description="Standalone FPGA network orchestration, simulation and models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("discover", parents=[common], help="probe the network and list devices")
    d.add_argument("--period", type=float, default=1.0, help="probe period in seconds")
    d.add_argument("--settle", type=float, default=0.01, help="simulated seconds to listen")
    d.set_defaults(func=cmd_discover)

    pr = sub.add_parser("program", parents=[common], help="partially reconfigure devices")
    pr.add_argument("--rbf", required=True, help="raw bitstream file")
    pr.add_argument("--targets", default="all", help="'all' (broadcast) or comma separated MACs")
    pr.set_defaults(func=cmd_program)

    b = sub.add_parser("bench-ptrans", parents=[common], help="distributed transpose benchmark")
    b.add_argument("--n", type=int, default=512, help="matrix dimension (per device for weak scaling)")
    b.add_argument("--devices", help="comma separated device counts")
    b.add_argument("--scaling", choices=("strong", "weak"), default="strong")
    b.add_argument("--sweep", action="store_true", help="use the standard device-count sweep (implies --pad)")
    b.add_argument("--pad", action="store_true", help="zero-pad when n is not divisible by k")
    b.add_argument("--csv", help="also write results to this CSV file")
    b.set_defaults(func=cmd_bench_ptrans)

    m = sub.add_parser("model", help="analytic models")
    msub = m.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    r = msub.add_parser("reconfig", parents=[common])
    r.add_argument("--flow", choices=[f.value for f in models.Flow])
    r.add_argument("--n", type=int)
    r.add_argument("--table", action="store_true")
    c = msub.add_parser("cost", parents=[common])
    c.add_argument("--n", type=int)
    c.add_argument("--table", action="store_true")
    cs = msub.add_parser("case-study", parents=[common])
    cs.add_argument("--pct", type=float)
    cs.add_argument("--table", action="store_true")
    for sp in (r, c, cs):
        sp.set_defaults(func=cmd_model)

    t = sub.add_parser("tables", parents=[common], help="print every model table")
    t.set_defaults(func=cmd_tables)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "n", None) is not None and args.n < 1:
            raise UsageError("--n must be positive")
        if getattr(args, "pct", None) is not None and not 0 <= args.pct <= 100:
            raise UsageError("--pct must be within [0, 100]")
        return args.func(args)
    except (UsageError, ConfigError, IndivisiblePartition, ValueError) as exc:
        print(f"saf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HostTimeout as exc:
        print(f"saf: error: {exc}", file=sys.stderr)
        return EXIT_TOTAL
    except HostError as exc:
        print(f"saf: error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
