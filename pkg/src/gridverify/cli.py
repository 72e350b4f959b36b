"""Command line entry point: ``gridverify verify | sweep | analyze``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .adversary import ATTACK_KINDS, AttackSpec
from .admm import AdmmConfig
from .exceptions import GridVerifyError
from .orchestrator import (
    EXIT_USAGE,
    ScenarioConfig,
    emit_outputs,
    format_deviation_table,
    prepare,
    run_sweep,
    run_verification,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text: str) -> list[int]:
    """``"1..7"``, ``"1,3,5"`` or ``"4"`` -> list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"empty range {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridverify", description="Decentralized verification of prosumer injections.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run one scenario")
    v.add_argument("--scenario", required=True, type=Path)
    v.add_argument("--seed", type=int, help="noise and attack seed")
    v.add_argument("--out", type=Path, help="output directory (default: the scenario's output_dir)")
    v.add_argument("--attacker", type=int)
    v.add_argument("--attack-kind", choices=ATTACK_KINDS)
    v.add_argument("--max-iters", type=int)
    v.add_argument("--emit-traces", action="store_true", help="write per-pair shared-variable traces")
    v.add_argument("--no-ledger", action="store_true", help="exchange messages directly")

    s = sub.add_parser("sweep", help="state-update attack from each region in turn")
    s.add_argument("--scenario", required=True, type=Path)
    s.add_argument("--attackers", default="1..7")
    s.add_argument("--seeds", type=int, default=20, help="seeds 0..N-1 per attacker")
    s.add_argument("--rho", type=float)
    s.add_argument("--out", type=Path)

    a = sub.add_parser("analyze", help="print the deviation table of a report")
    a.add_argument("--report", required=True, type=Path)
    a.add_argument("--limit", type=int)
    return p


def _verify(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["noise_seed"] = args.seed
    if args.max_iters is not None:
        changes["admm"] = AdmmConfig(**{**cfg.admm.__dict__, "max_iter": args.max_iters})
    if args.no_ledger:
        changes["use_ledger"] = False
    if args.attacker is not None or args.attack_kind is not None:
        kind = args.attack_kind or "state_update"
        if kind != "none" and args.attacker is None:
            raise ValueError("--attack-kind needs --attacker")
        att = cfg.attack.__dict__ | {"kind": kind, "attacker": args.attacker or 0}
        if args.seed is not None:
            att["seed"] = args.seed
        changes["attack"] = AttackSpec(**att)
    elif args.seed is not None and cfg.attack.active:
        changes["attack"] = AttackSpec(**(cfg.attack.__dict__ | {"seed": args.seed}))
    cfg = cfg.replace(**changes)
    prep = prepare(cfg)
    report = run_verification(cfg, prep)

    print(f"outcome: {report.outcome}")
    for ph in report.phases:
        tag = " (superseded)" if ph.superseded else ""
        print(f"phase {ph.index}: regions {list(ph.regions)} -> {ph.status} after {ph.iterations} "
              f"rounds, verdict {ph.verdict}{tag}")
        if ph.final_pi is not None:
            print("  pi: " + " ".join(f"{r}:{v:.3f}" for r, v in zip(ph.regions, ph.final_pi)))
    if report.isolated:
        print(f"isolated: {report.isolated}")
    print(format_deviation_table(report.deviations, limit=10, base_mva=prep.net.base_mva))

    out = args.out or (Path(cfg.output_dir) if cfg.output_dir else None)
    if out is not None:
        paths = emit_outputs(report, cfg, out, traces=args.emit_traces, space=prep.space)
        print(f"wrote {len(paths)} files to {out}")
    return report.exit_code


def _sweep(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    attackers = parse_range(args.attackers)
    prep = prepare(cfg)
    bad = [j for j in attackers if j not in prep.regions]
    if bad:
        raise ValueError(f"unknown regions {bad}")
    runs = run_sweep(cfg, attackers, range(args.seeds), rho=args.rho, prepared=prep)
    regions = prep.regions
    print(f"{'attacker':>8} {'runs':>5} {'verdict=j':>9} {'argmax=j':>8}  mean pi")
    rows = {}
    for j in attackers:
        mine = [r for r in runs if r.attacker == j]
        hits = sum(r.argmax == j for r in mine)
        verdicts = Counter(r.verdict for r in mine)
        pis = np.array([r.pi for r in mine if r.pi])
        mean_pi = pis.mean(axis=0) if pis.size else np.full(len(regions), np.nan)
        rows[j] = mean_pi
        print(f"{j:>8} {len(mine):>5} {verdicts[f'attacker({j})']:>9} {hits:>8}  "
              + " ".join(f"{v:.3f}" for v in mean_pi))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        for j, mean_pi in rows.items():
            with open(args.out / f"pi_bars_attacker{j}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["region", "mean_pi"])
                for r, v in zip(regions, mean_pi):
                    w.writerow([r, repr(float(v))])
        with open(args.out / "sweep_runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attacker", "seed", "verdict", "argmax", "pi_converged", "iterations"])
            for r in runs:
                w.writerow([r.attacker, r.seed, r.verdict, r.argmax, r.pi_converged, r.iterations])
    return 0


def _analyze(args) -> int:
    with open(args.report) as fh:
        report = json.load(fh)
    print(f"outcome: {report['outcome']}")
    base = report.get("metadata", {}).get("base_mva", 1.0)
    print(format_deviation_table(report["deviations"], limit=args.limit, base_mva=base))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return {"verify": _verify, "sweep": _sweep, "analyze": _analyze}[args.command](args)
    except (GridVerifyError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"gridverify: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
