"""Command-line interface: ``simexp <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .harness import CellKey, SweepConfig, SeedUnit, read_reports, run_cell, run_sweep, write_reports, fmt

log = logging.getLogger("simexp")


def load_config(args) -> SweepConfig:
    cfg = SweepConfig.load(args.config) if args.config else SweepConfig()
    if args.master_seed is not None:
        cfg.master_seed = args.master_seed
    return cfg.validate()


def _cell_from_args(args) -> CellKey:
    if args.mode == "coding" and (args.alpha_fix is None or args.omega_weak is None):
        raise SystemExit("coding cells need --alpha-fix and --omega-weak")
    a = args.alpha_fix if args.mode == "coding" else None
    w = args.omega_weak if args.mode == "coding" else None
    return CellKey(args.mode, float(args.beta), int(args.n_obs), int(args.n_exp), a, w)


def cmd_print_config(args) -> int:
    sys.stdout.write(load_config(args).dumps())
    return 0


def cmd_check(args) -> int:
    from .identification import identification_check
    from .theory import run_all

    ok = True
    for rep in run_all():
        print(rep.line())
        ok &= rep.passed
    for beta in (0.0, 0.99):
        r = identification_check(beta)
        exact = r.exp_sim_error <= 1e-12
        control = r.max_abs_z > 5 if beta > 0 else r.max_abs_z < 3
        status = "PASS" if exact and control else "FAIL"
        ok &= exact and control
        print(f"{status} identification beta={beta:g}: EXP+SIM error {r.exp_sim_error:.1e}, OBS plug-in max |z| {r.max_abs_z:.2f}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    res = run_sweep(cfg, args.out, threads=args.threads)
    print(f"{len(res.reports)} reports, {len(res.failures)} failed cell-seeds, {res.elapsed:.1f}s -> {res.out_dir}")
    if res.aggregate is not None:
        _print_aggregate(res.aggregate)
    return 1 if res.failures else 0


def cmd_report(args) -> int:
    reports = read_reports(args.out)
    if not reports:
        print(f"no cell CSVs under {args.out}/cells", file=sys.stderr)
        return 1
    _print_aggregate(write_reports(reports, args.out))
    return 0


def _print_aggregate(agg):
    print(f"{'method':<16} {'avg_rank':>8} {'top3':>5} {'excess%':>9} {'macro':>8}")
    for m in sorted(agg.methods, key=lambda m: m.avg_rank):
        print(f"{m.method:<16} {m.avg_rank:8.3f} {m.top3_count:5d} {m.excess_pct:9.1f} {m.macro_regret:8.4f}")
    print()
    for c in agg.cells:
        print(f"{c.cell:<44} {c.winner:<16} gap {c.gap:.4f}")


def cmd_run_cell(args) -> int:
    cfg = load_config(args)
    cell = _cell_from_args(args)
    reports = run_cell(cfg, cell, args.seed_index)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["cell", "seed", "method", "regret", "rmse_xa", "rmse_agent", "rmse_agent_dr", "hparams"])
    for r in reports:
        w.writerow([r.cell, r.seed, r.method] + [fmt(v) for v in (r.regret, r.rmse_xa, r.rmse_agent, r.rmse_agent_dr)]
                   + [json.dumps(r.hparams, sort_keys=True)])
    return 0


def cmd_generate(args) -> int:
    """Dump the OBS, EXP and truth data of one cell and seed index."""
    import scipy.sparse as sp

    cfg = load_config(args)
    cell = _cell_from_args(args)
    unit = SeedUnit(cfg, args.seed_index)
    f = unit.factory_for(cell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = {
        "obs": f.obs(cell.n_obs, cell.beta, cell.router(cfg), cell.mode),
        "exp": f.exp(cell.n_exp, cell.mode),
    }
    for name, d in datasets.items():
        hid = d.mediators.hidden
        aux = d.aux
        header = ["context_id", "segment", "agent", "outcome"] + [f"hidden{k}" for k in range(hid.shape[1])]
        if aux is not None:
            header += [f"aux{k}" for k in range(aux.shape[1])]
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(d.n):
                row = [int(d.contexts.ids[i]), int(d.contexts.segment[i]), int(d.actions[i]), fmt(float(d.outcomes[i]))]
                row += [fmt(float(v)) for v in hid[i]]
                if aux is not None:
                    row += [fmt(float(v)) for v in aux[i]]
                w.writerow(row)
        sp.save_npz(out / f"{name}_mediators.npz", d.mediators.counts.tocsr())
    truth = f.truth(cell.mode, cfg.n_eval, cfg.n_true, cfg.b_true)
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eval_context", "agent", "q_true"])
        for x in range(truth.q_true.shape[0]):
            for a in range(truth.q_true.shape[1]):
                w.writerow([x, a, fmt(float(truth.q_true[x, a]))])
    with open(out / "mu_true.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "mu_true"])
        for a, v in enumerate(truth.mu_true):
            w.writerow([a, fmt(float(v))])
    print(f"wrote {cell.name} seed {args.seed_index} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (defaults if omitted)")
    common.add_argument("--out", type=Path, default=Path("simexp-out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--master-seed", type=int, default=None, help="override the configured master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument("--mode", default="scalar", choices=["scalar", "rubric_smooth", "rubric_sharp", "coding"])
    cell.add_argument("--beta", type=float, default=0.5)
    cell.add_argument("--n-obs", type=int, default=2000)
    cell.add_argument("--n-exp", type=int, default=100)
    cell.add_argument("--alpha-fix", type=float, default=None)
    cell.add_argument("--omega-weak", type=float, default=None)
    cell.add_argument("--seed-index", type=int, default=0)

    p = argparse.ArgumentParser(prog="simexp", description="Three-source causal evaluation benchmark")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("print-config", parents=[common], help="print the resolved configuration as TOML").set_defaults(
        func=cmd_print_config
    )
    sub.add_parser("check", parents=[common], help="run the theory and identification oracles").set_defaults(func=cmd_check)
    sub.add_parser("sweep", parents=[common], help="run every cell and seed, write CSV reports").set_defaults(func=cmd_sweep)
    sub.add_parser("report", parents=[common], help="re-aggregate existing cell CSVs").set_defaults(func=cmd_report)
    sub.add_parser("run-cell", parents=[common, cell], help="run one cell for one seed, CSV to stdout").set_defaults(
        func=cmd_run_cell
    )
    sub.add_parser("generate", parents=[common, cell], help="dump the datasets of one cell and seed").set_defaults(
        func=cmd_generate
    )
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
