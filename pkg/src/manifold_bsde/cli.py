"""Command-line entry point.

Verbs:
  run <config>                 execute one experiment
  study --axis eps|dt|dx <config>
  bench list                   show built-in benchmark configs
  bench run <id>               execute a built-in benchmark

Exit code 0 iff every asserted criterion of the run passed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .benchmarks import get_benchmark, list_benchmarks
from .config import load_config
from .errors import ManifoldBSDEError
from .experiment import convergence_study, run_experiment


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--workers", type=int, default=1, help="ensemble worker threads")
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument(
        "--export-trajectory",
        choices=["bin", "csv"],
        default=None,
        help="also dump the source trajectory",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manifold-bsde",
        description="Penalized construction and verification of manifold-valued BSDEs",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to a .toml or .json config")
    _add_common(p_run)

    p_study = sub.add_parser("study", help="convergence study along one axis")
    p_study.add_argument("--axis", required=True, choices=["eps", "dt", "dx"])
    p_study.add_argument("config")
    _add_common(p_study)

    p_bench = sub.add_parser("bench", help="built-in benchmarks")
    bench_sub = p_bench.add_subparsers(dest="bench_verb", required=True)
    bench_sub.add_parser("list", help="list benchmark ids")
    p_bench_run = bench_sub.add_parser("run", help="run a benchmark by id")
    p_bench_run.add_argument("id")
    _add_common(p_bench_run)

    return parser


def _apply_overrides(cfg, args):
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _execute_run(cfg, args) -> int:
    out = cfg.out if cfg.out is not None else "runs/" + cfg.config_hash()[:12]
    report = run_experiment(
        cfg, out_dir=out, workers=args.workers, export_trajectory=args.export_trajectory
    )
    for name, c in sorted(report.criteria.items()):
        status = "PASS" if c["passed"] else ("----" if c["passed"] is None else "FAIL")
        print(f"[{status}] {name}: value={c['value']:.6g}")
    print(f"report written to {out}/report.json")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            cfg = _apply_overrides(load_config(args.config), args)
            return _execute_run(cfg, args)
        if args.verb == "study":
            cfg = _apply_overrides(load_config(args.config), args)
            out = cfg.out if cfg.out is not None else "runs/" + cfg.config_hash()[:12]
            report = convergence_study(cfg, args.axis, out_dir=out, workers=args.workers)
            print(f"axis={report.axis} fitted_order={report.fitted_order:.4f}")
            for lv, val in zip(report.levels, report.values):
                print(f"  level={lv:.6g} value={val:.6g}")
            return 0
        if args.verb == "bench":
            if args.bench_verb == "list":
                for name, desc in list_benchmarks().items():
                    print(f"{name}: {desc}")
                return 0
            cfg = _apply_overrides(get_benchmark(args.id), args)
            return _execute_run(cfg, args)
    except ManifoldBSDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
